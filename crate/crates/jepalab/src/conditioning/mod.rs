//! Conditioning position tokens: pooled position embeddings appended to
//! encoder inputs. Training pools target/context windows in 1D with kernel
//! `m//2`; inference pools the full position grid in 2D.

pub mod flops;

use serde::{Deserialize, Serialize};

use crate::data::{GridShape, TokenizedImage};
use crate::error::{Error, Result};
use crate::masking::MaskSpec;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CondOrigin {
    TargetWindows,
    ContextWindow,
    FullGrid,
}

/// Pooled position rows carrying only location information.
#[derive(Clone, Debug)]
pub struct ConditionTokens {
    pub tokens: Tensor<f32>,
    pub origin: CondOrigin,
}

impl ConditionTokens {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Assembled encoder input. Content rows stay raw (patch pixels plus the
/// positions to add after projection) so the patch projection is part of the
/// recorded graph; condition tokens carry no image content by construction.
#[derive(Clone, Debug)]
pub struct EncoderInput {
    pub content_patches: Tensor<f32>,
    pub content_positions: Tensor<f32>,
    pub condition: Option<ConditionTokens>,
}

impl EncoderInput {
    pub fn content_len(&self) -> usize {
        self.content_patches.rows()
    }

    pub fn condition_len(&self) -> usize {
        self.condition.as_ref().map_or(0, |c| c.len())
    }

    pub fn seq_len(&self) -> usize {
        self.content_len() + self.condition_len()
    }
}

/// Mean over consecutive row windows, kernel = stride, remainder dropped.
fn pool_rows_1d(rows: &Tensor<f32>, kernel: usize) -> Tensor<f32> {
    let (len, d) = (rows.rows(), rows.cols());
    let out_len = len / kernel;
    let inv = 1.0 / kernel as f32; // multiply by inverse, bit-identical to the graph op
    let mut data = vec![0f32; out_len * d];
    for t in 0..out_len {
        let dst = &mut data[t * d..(t + 1) * d];
        for j in 0..kernel {
            for (o, &v) in dst.iter_mut().zip(rows.row(t * kernel + j)) {
                *o += v;
            }
        }
        for o in dst.iter_mut() {
            *o *= inv;
        }
    }
    Tensor::new(vec![out_len, d], data).expect("pool length")
}

/// 1D-pool ordered position rows with kernel and step `max(1, m//2)`.
/// Output count is `floor(len / kernel)`; an empty input is an error, an
/// output shorter than one window yields zero tokens (callers drop those).
pub fn pool_positions_1d(p_rows: &Tensor<f32>, m: usize, origin: CondOrigin) -> Result<ConditionTokens> {
    if p_rows.rows() == 0 {
        return Err(Error::Invalid("pool_positions_1d: empty position set".into()));
    }
    let kernel = (m / 2).max(1);
    Ok(ConditionTokens {
        tokens: pool_rows_1d(p_rows, kernel),
        origin,
    })
}

/// 2D-pool the full position grid. Kernel windows are placed every `stride`
/// cells; windows that would overflow the grid are dropped. With both grid
/// dimensions divisible by `kernel` and stride = kernel the token count is
/// exactly `T / kernel^2`.
pub fn pool_positions_2d(
    positions: &Tensor<f32>,
    grid: GridShape,
    kernel: usize,
    stride: usize,
) -> Result<ConditionTokens> {
    if positions.rows() != grid.tokens() {
        return Err(Error::ShapeMismatch {
            op: "pool_positions_2d",
            details: format!("{} rows vs grid {}x{}", positions.rows(), grid.rows, grid.cols),
        });
    }
    if kernel == 0 || stride == 0 || kernel > grid.rows || kernel > grid.cols {
        return Err(Error::Invalid(format!(
            "pool_positions_2d: kernel {kernel} stride {stride} does not fit grid {}x{}",
            grid.rows, grid.cols
        )));
    }
    let d = positions.cols();
    let out_r = (grid.rows - kernel) / stride + 1;
    let out_c = (grid.cols - kernel) / stride + 1;
    let inv = 1.0 / (kernel * kernel) as f32;
    let mut data = vec![0f32; out_r * out_c * d];
    for oi in 0..out_r {
        for oj in 0..out_c {
            let dst = &mut data[(oi * out_c + oj) * d..(oi * out_c + oj + 1) * d];
            for a in 0..kernel {
                for b in 0..kernel {
                    let cell = (oi * stride + a) * grid.cols + (oj * stride + b);
                    for (o, &v) in dst.iter_mut().zip(positions.row(cell)) {
                        *o += v;
                    }
                }
            }
            for o in dst.iter_mut() {
                *o *= inv;
            }
        }
    }
    Ok(ConditionTokens {
        tokens: Tensor::new(vec![out_r * out_c, d], data)?,
        origin: CondOrigin::FullGrid,
    })
}

fn non_empty(c: ConditionTokens) -> Option<ConditionTokens> {
    if c.is_empty() {
        None
    } else {
        Some(c)
    }
}

/// Student input: context tokens plus (when conditioning) the per-target-
/// block pooled positions, concatenated in block order.
pub fn build_context_input(
    img: &TokenizedImage,
    spec: &MaskSpec,
    conditioning: bool,
) -> Result<EncoderInput> {
    let condition = if conditioning {
        let d = img.positions.cols();
        let mut rows: Vec<f32> = Vec::new();
        let mut count = 0;
        for block in &spec.targets {
            let p = img.positions.gather_rows(block);
            let pooled = pool_positions_1d(&p, spec.m, CondOrigin::TargetWindows)?;
            count += pooled.len();
            rows.extend_from_slice(pooled.tokens.data());
        }
        non_empty(ConditionTokens {
            tokens: Tensor::new(vec![count, d], rows)?,
            origin: CondOrigin::TargetWindows,
        })
    } else {
        None
    };
    Ok(EncoderInput {
        content_patches: img.patches.gather_rows(&spec.context),
        content_positions: img.positions.gather_rows(&spec.context),
        condition,
    })
}

/// Teacher input: the full image plus (when conditioning) pooled context
/// positions. Target latents are gathered from the content segment later.
pub fn build_target_input(
    img: &TokenizedImage,
    spec: &MaskSpec,
    conditioning: bool,
) -> Result<EncoderInput> {
    let condition = if conditioning {
        let p = img.positions.gather_rows(&spec.context);
        non_empty(pool_positions_1d(&p, spec.m, CondOrigin::ContextWindow)?)
    } else {
        None
    };
    Ok(EncoderInput {
        content_patches: img.patches.clone(),
        content_positions: img.positions.clone(),
        condition,
    })
}

/// Inference input: the full image conditioned on the 2D-pooled position
/// grid.
pub fn build_inference_input(
    img: &TokenizedImage,
    kernel: usize,
    stride: usize,
    conditioning: bool,
) -> Result<EncoderInput> {
    let condition = if conditioning {
        non_empty(pool_positions_2d(&img.positions, img.grid, kernel, stride)?)
    } else {
        None
    };
    Ok(EncoderInput {
        content_patches: img.patches.clone(),
        content_positions: img.positions.clone(),
        condition,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, sincos_pos_embed, tokenize};
    use crate::masking::{sample_masks, MaskConfig};
    use crate::numerics::Graph;

    fn demo_image() -> TokenizedImage {
        let imgs = gen_synthetic(21, 1, 3, 0.8, 32);
        tokenize(&imgs[0], 4, 64).unwrap()
    }

    fn spec_with_m4(img: &TokenizedImage) -> MaskSpec {
        // Four 2x2 target blocks and a 48-token context.
        let blocks = [(0usize, 0usize), (0, 6), (6, 0), (6, 6)];
        let targets: Vec<Vec<usize>> = blocks
            .iter()
            .map(|&(r0, c0)| {
                vec![r0 * 8 + c0, r0 * 8 + c0 + 1, (r0 + 1) * 8 + c0, (r0 + 1) * 8 + c0 + 1]
            })
            .collect();
        let used: std::collections::BTreeSet<usize> = targets.iter().flatten().copied().collect();
        let context: Vec<usize> = (0..64).filter(|i| !used.contains(i)).collect();
        MaskSpec {
            context,
            targets,
            m: 4,
            grid: img.grid,
        }
    }

    #[test]
    fn pool_1d_counts() {
        let p = sincos_pos_embed(8, 8, 16).unwrap();
        // m = 4 => kernel 2: 4-row block pools to 2 tokens.
        let block = p.gather_rows(&[0, 1, 2, 3]);
        assert_eq!(pool_positions_1d(&block, 4, CondOrigin::TargetWindows).unwrap().len(), 2);
        // 48 context rows, m = 4 => 24 tokens.
        let ctx = p.gather_rows(&(0..48).collect::<Vec<_>>());
        assert_eq!(pool_positions_1d(&ctx, 4, CondOrigin::ContextWindow).unwrap().len(), 24);
        // 5 rows, kernel 2 => 2 tokens, 5th dropped.
        let five = p.gather_rows(&[0, 1, 2, 3, 4]);
        let pooled = pool_positions_1d(&five, 4, CondOrigin::ContextWindow).unwrap();
        assert_eq!(pooled.len(), 2);
        // m = 2 => kernel clamps to 1: identity count.
        assert_eq!(pool_positions_1d(&five, 2, CondOrigin::ContextWindow).unwrap().len(), 5);
        // empty input errors
        let empty = p.gather_rows(&[]);
        assert!(pool_positions_1d(&empty, 4, CondOrigin::ContextWindow).is_err());
    }

    #[test]
    fn pool_2d_counts() {
        let p = sincos_pos_embed(8, 8, 16).unwrap();
        let c = pool_positions_2d(&p, GridShape::new(8, 8), 4, 4).unwrap();
        assert_eq!(c.len(), 4); // 64 / 16

        let p = sincos_pos_embed(12, 8, 16).unwrap();
        let c = pool_positions_2d(&p, GridShape::new(12, 8), 4, 4).unwrap();
        assert_eq!(c.len(), 6); // 3 * 2

        let p = sincos_pos_embed(2, 2, 16).unwrap();
        assert!(pool_positions_2d(&p, GridShape::new(2, 2), 4, 4).is_err());
    }

    #[test]
    fn pool_2d_of_identical_rows_is_that_row() {
        let row: Vec<f32> = (0..16).map(|i| i as f32 * 0.5).collect();
        let t = Tensor::from_rows(&vec![row.clone(); 16]);
        let c = pool_positions_2d(&t, GridShape::new(4, 4), 4, 4).unwrap();
        assert_eq!(c.len(), 1);
        for (a, b) in c.tokens.data().iter().zip(&row) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn pooling_matches_graph_ops() {
        // The eager pooling here and the differentiable graph ops must agree.
        let p = sincos_pos_embed(8, 8, 32).unwrap();
        let eager = pool_positions_2d(&p, GridShape::new(8, 8), 4, 4).unwrap();
        let mut g = Graph::<f32>::inference();
        let x = g.input(&p).unwrap();
        let y = g.avg_pool_2d(x, (8, 8), 4, 4).unwrap();
        assert_eq!(g.data(y), eager.tokens.data());

        let block = p.gather_rows(&(0..20).collect::<Vec<_>>());
        let eager = pool_positions_1d(&block, 6, CondOrigin::ContextWindow).unwrap();
        let mut g = Graph::<f32>::inference();
        let x = g.input(&block).unwrap();
        let y = g.avg_pool_1d(x, 3).unwrap();
        assert_eq!(g.data(y), eager.tokens.data());
    }

    #[test]
    fn context_input_lengths() {
        let img = demo_image();
        let spec = spec_with_m4(&img);
        assert_eq!(spec.context.len(), 48);
        let ec = build_context_input(&img, &spec, true).unwrap();
        assert_eq!(ec.seq_len(), 48 + 8); // 2 per block x 4 blocks
        let base = build_context_input(&img, &spec, false).unwrap();
        assert_eq!(base.seq_len(), 48);
        assert!(base.condition.is_none());

        // k = 1 degenerate config: 48 + 2.
        let mut one = spec.clone();
        one.targets.truncate(1);
        let ec1 = build_context_input(&img, &one, true).unwrap();
        assert_eq!(ec1.seq_len(), 50);
    }

    #[test]
    fn target_input_lengths() {
        let img = demo_image();
        let spec = spec_with_m4(&img);
        let t = build_target_input(&img, &spec, true).unwrap();
        assert_eq!(t.seq_len(), 64 + 24); // floor(48/2)
        let base = build_target_input(&img, &spec, false).unwrap();
        assert_eq!(base.seq_len(), 64);

        let mut m2 = spec.clone();
        m2.m = 2; // kernel clamp path: 64 + 48
        let t2 = build_target_input(&img, &m2, true).unwrap();
        assert_eq!(t2.seq_len(), 64 + 48);
    }

    #[test]
    fn inference_input_lengths() {
        let img = demo_image();
        let inf = build_inference_input(&img, 4, 4, true).unwrap();
        assert_eq!(inf.seq_len(), 64 + 4); // T//16
        let base = build_inference_input(&img, 4, 4, false).unwrap();
        assert_eq!(base.seq_len(), 64);

        let big = gen_synthetic(3, 1, 3, 0.5, 64);
        let big = tokenize(&big[0], 4, 64).unwrap(); // 16x16 grid, T=256
        let inf = build_inference_input(&big, 4, 4, true).unwrap();
        assert_eq!(inf.seq_len(), 256 + 16);
    }

    #[test]
    fn condition_tokens_deterministic_over_masks() {
        let img = demo_image();
        let cfg = MaskConfig::default();
        let spec = sample_masks(&mut crate::data::derive_rng(5, 5), img.grid, &cfg).unwrap();
        let a = build_context_input(&img, &spec, true).unwrap();
        let b = build_context_input(&img, &spec, true).unwrap();
        assert_eq!(
            a.condition.as_ref().unwrap().tokens.data(),
            b.condition.as_ref().unwrap().tokens.data()
        );
    }
}
