//! ViT student/teacher encoders and the narrow predictor, plus EMA updates.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::EncoderInput;
use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, NodeLookup, ParamStore, Scalar, Tensor};

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "encoder dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.dim % 4 != 0 {
            return Err(Error::Config(format!(
                "encoder dim {} must be divisible by 4 for sin-cos positions",
                self.dim
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
}

impl PredictorConfig {
    pub fn validate(&self, encoder_dim: usize) -> Result<()> {
        if self.dim > encoder_dim {
            return Err(Error::Config(format!(
                "predictor dim {} exceeds encoder dim {}",
                self.dim, encoder_dim
            )));
        }
        if self.dim % self.heads != 0 || self.dim % 4 != 0 {
            return Err(Error::Config(format!(
                "predictor dim {} must divide by heads {} and by 4",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Named presets. `vit-t/4` is the desk-scale configuration; the full-scale
/// presets are kept for FLOP accounting and config completeness.
pub fn preset(name: &str) -> Result<(EncoderConfig, PredictorConfig)> {
    let (enc, pred) = match name {
        "vit-t/4" => (
            EncoderConfig { depth: 4, dim: 64, heads: 4, mlp_ratio: 4, patch: 4 },
            PredictorConfig { depth: 2, dim: 32, heads: 4 },
        ),
        "vit-l/16" => (
            EncoderConfig { depth: 24, dim: 1024, heads: 16, mlp_ratio: 4, patch: 16 },
            PredictorConfig { depth: 12, dim: 384, heads: 16 },
        ),
        "vit-h/14" => (
            EncoderConfig { depth: 32, dim: 1280, heads: 16, mlp_ratio: 4, patch: 14 },
            PredictorConfig { depth: 12, dim: 384, heads: 16 },
        ),
        other => {
            return Err(Error::Config(format!(
                "unknown model preset `{other}` (known: vit-t/4, vit-l/16, vit-h/14)"
            )))
        }
    };
    Ok((enc, pred))
}

/// Student weights, their EMA copy, and the predictor.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub student: ParamStore,
    pub teacher: ParamStore,
    pub predictor: ParamStore,
    pub enc: EncoderConfig,
    pub pred: PredictorConfig,
}

fn normal(rng: &mut ChaCha8Rng, std: f32) -> f32 {
    // Box-Muller; keeps init independent of distribution-crate internals.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32 * std
}

fn init_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f32) -> Tensor<f32> {
    let data = (0..rows * cols).map(|_| normal(rng, std)).collect();
    Tensor::new(vec![rows, cols], data).expect("init shape")
}

fn add_tower_params(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    depth: usize,
    dim: usize,
    mlp_ratio: usize,
) -> Result<()> {
    let std = 0.02;
    for i in 0..depth {
        let p = |s: &str| format!("block{i}.{s}");
        store.add(p("ln1.g"), Tensor::full(vec![1, dim], 1.0))?;
        store.add(p("ln1.b"), Tensor::zeros(vec![1, dim]))?;
        for proj in ["attn.q", "attn.k", "attn.v", "attn.o"] {
            store.add(p(&format!("{proj}.w")), init_matrix(rng, dim, dim, std))?;
            store.add(p(&format!("{proj}.b")), Tensor::zeros(vec![1, dim]))?;
        }
        store.add(p("ln2.g"), Tensor::full(vec![1, dim], 1.0))?;
        store.add(p("ln2.b"), Tensor::zeros(vec![1, dim]))?;
        store.add(p("mlp.fc1.w"), init_matrix(rng, dim, mlp_ratio * dim, std))?;
        store.add(p("mlp.fc1.b"), Tensor::zeros(vec![1, mlp_ratio * dim]))?;
        store.add(p("mlp.fc2.w"), init_matrix(rng, mlp_ratio * dim, dim, std))?;
        store.add(p("mlp.fc2.b"), Tensor::zeros(vec![1, dim]))?;
    }
    store.add("final_ln.g", Tensor::full(vec![1, dim], 1.0))?;
    store.add("final_ln.b", Tensor::zeros(vec![1, dim]))?;
    Ok(())
}

impl ModelState {
    /// Initialize the student, copy it into the teacher, and initialize the
    /// predictor. Deterministic per seed.
    pub fn init(enc: EncoderConfig, pred: PredictorConfig, seed: u64) -> Result<Self> {
        enc.validate()?;
        pred.validate(enc.dim)?;
        let mut rng = crate::data::derive_rng(seed, 0x11217);
        let std = 0.02;

        let mut student = ParamStore::new();
        let patch_len = enc.patch * enc.patch * 3;
        student.add("patch_proj.w", init_matrix(&mut rng, patch_len, enc.dim, std))?;
        student.add("patch_proj.b", Tensor::zeros(vec![1, enc.dim]))?;
        add_tower_params(&mut student, &mut rng, enc.depth, enc.dim, enc.mlp_ratio)?;

        let mut predictor = ParamStore::new();
        predictor.add("proj_in.w", init_matrix(&mut rng, enc.dim, pred.dim, std))?;
        predictor.add("proj_in.b", Tensor::zeros(vec![1, pred.dim]))?;
        predictor.add("mask_token", init_matrix(&mut rng, 1, pred.dim, std))?;
        add_tower_params(&mut predictor, &mut rng, pred.depth, pred.dim, 4)?;
        predictor.add("proj_out.w", init_matrix(&mut rng, pred.dim, enc.dim, std))?;
        predictor.add("proj_out.b", Tensor::zeros(vec![1, enc.dim]))?;

        let teacher = student.clone();
        Ok(ModelState { student, teacher, predictor, enc, pred })
    }

    pub fn param_count(&self) -> usize {
        self.student.numel() + self.predictor.numel()
    }
}

/// Per-token encoder or predictor outputs; the first `content_len` rows are
/// content tokens, the rest are conditioning tokens.
#[derive(Clone, Copy, Debug)]
pub struct LatentSequence {
    /// After the final layer norm (and its affine).
    pub values: NodeId,
    /// Before the final layer norm.
    pub pre_norm: NodeId,
    pub content_len: usize,
    pub seq_len: usize,
}

impl LatentSequence {
    /// Content-token rows only; condition-token outputs are discarded by
    /// every downstream consumer.
    pub fn content<S: Scalar>(&self, g: &mut Graph<S>) -> Result<NodeId> {
        if self.content_len == self.seq_len {
            return Ok(self.values);
        }
        let idx: Vec<usize> = (0..self.content_len).collect();
        g.gather_rows(self.values, &idx)
    }

    pub fn content_pre_norm<S: Scalar>(&self, g: &mut Graph<S>) -> Result<NodeId> {
        if self.content_len == self.seq_len {
            return Ok(self.pre_norm);
        }
        let idx: Vec<usize> = (0..self.content_len).collect();
        g.gather_rows(self.pre_norm, &idx)
    }
}

fn convert<S: Scalar>(t: &Tensor<f32>) -> Tensor<S> {
    t.map(|v| S::from_f64(v as f64))
}

fn ln_affine<S: Scalar>(
    g: &mut Graph<S>,
    p: &impl NodeLookup,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let h = g.layer_norm(x, S::from_f64(LN_EPS))?;
    let h = g.row_mul(h, p.node(&format!("{prefix}.g"))?)?;
    g.add_bias(h, p.node(&format!("{prefix}.b"))?)
}

fn linear<S: Scalar>(
    g: &mut Graph<S>,
    p: &impl NodeLookup,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let t = g.matmul(x, p.node(&format!("{prefix}.w"))?)?;
    g.add_bias(t, p.node(&format!("{prefix}.b"))?)
}

fn transformer_block<S: Scalar>(
    g: &mut Graph<S>,
    p: &impl NodeLookup,
    i: usize,
    x: NodeId,
    heads: usize,
) -> Result<NodeId> {
    let name = |s: &str| format!("block{i}.{s}");
    let h = ln_affine(g, p, &name("ln1"), x)?;
    let q = linear(g, p, &name("attn.q"), h)?;
    let k = linear(g, p, &name("attn.k"), h)?;
    let v = linear(g, p, &name("attn.v"), h)?;
    let a = g.mha(q, k, v, heads)?;
    let a = linear(g, p, &name("attn.o"), a)?;
    let x = g.add(x, a)?;

    let h = ln_affine(g, p, &name("ln2"), x)?;
    let m = linear(g, p, &name("mlp.fc1"), h)?;
    let m = g.gelu(m)?;
    let m = linear(g, p, &name("mlp.fc2"), m)?;
    g.add(x, m)
}

/// Run the encoder over an assembled input: project raw patches, add their
/// positions, append condition tokens, then the pre-norm transformer tower
/// and a final layer norm.
pub fn encode<S: Scalar>(
    g: &mut Graph<S>,
    p: &impl NodeLookup,
    cfg: &EncoderConfig,
    input: &EncoderInput,
) -> Result<LatentSequence> {
    let patches = g.input(&convert::<S>(&input.content_patches))?;
    let positions = g.input(&convert::<S>(&input.content_positions))?;
    let x = linear(g, p, "patch_proj", patches)?;
    let x = g.add(x, positions)?;

    let content_len = input.content_len();
    let mut seq = match &input.condition {
        Some(cond) => {
            let c = g.input(&convert::<S>(&cond.tokens))?;
            g.concat_rows(&[x, c])?
        }
        None => x,
    };
    let seq_len = input.seq_len();
    for i in 0..cfg.depth {
        seq = transformer_block(g, p, i, seq, cfg.heads)?;
    }
    let values = ln_affine(g, p, "final_ln", seq)?;
    Ok(LatentSequence { values, pre_norm: seq, content_len, seq_len })
}

/// Predict each target block from the student's content latents: project
/// into predictor width, append `mask_token + position` rows for the block,
/// run the predictor tower, and project the mask-token outputs back out.
pub fn predict<S: Scalar>(
    g: &mut Graph<S>,
    p: &impl NodeLookup,
    cfg: &PredictorConfig,
    z: &LatentSequence,
    target_blocks: &[Vec<usize>],
    pred_positions: &Tensor<f32>,
) -> Result<Vec<NodeId>> {
    let content = z.content(g)?;
    let ctx = linear(g, p, "proj_in", content)?;
    let ctx_len = z.content_len;
    let mask_token = p.node("mask_token")?;

    let mut out = Vec::with_capacity(target_blocks.len());
    for block in target_blocks {
        let pos = g.input(&convert::<S>(&pred_positions.gather_rows(block)))?;
        let queries = g.add_bias(pos, mask_token)?;
        let mut seq = g.concat_rows(&[ctx, queries])?;
        for i in 0..cfg.depth {
            seq = transformer_block(g, p, i, seq, cfg.heads)?;
        }
        let seq = ln_affine(g, p, "final_ln", seq)?;
        let idx: Vec<usize> = (ctx_len..ctx_len + block.len()).collect();
        let rows = g.gather_rows(seq, &idx)?;
        out.push(linear(g, p, "proj_out", rows)?);
    }
    Ok(out)
}

/// In-place EMA: teacher <- mu * teacher + (1 - mu) * student.
pub fn ema_update(state: &mut ModelState, mu: f32) -> Result<()> {
    if !state.student.layout_matches(&state.teacher) {
        return Err(Error::Invalid(
            "student/teacher parameter layout mismatch".into(),
        ));
    }
    let mut names: Vec<String> = Vec::with_capacity(state.teacher.len());
    for p in state.teacher.iter() {
        names.push(p.name.clone());
    }
    for name in names {
        let src = state.student.get(&name).expect("layout checked").value.clone();
        let dst = state.teacher.get_mut(&name).expect("layout checked");
        for (t, &s) in dst.value.data_mut().iter_mut().zip(src.data()) {
            *t = mu * *t + (1.0 - mu) * s;
        }
    }
    Ok(())
}

/// Linear EMA momentum ramp from `range.0` at step 0 to `range.1` at
/// `total_steps`.
pub fn momentum_schedule(step: u64, total_steps: u64, range: (f64, f64)) -> f64 {
    if total_steps == 0 {
        return range.1;
    }
    let t = (step.min(total_steps)) as f64 / total_steps as f64;
    range.0 + (range.1 - range.0) * t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::build_context_input;
    use crate::data::{gen_synthetic, sincos_pos_embed, tokenize};
    use crate::masking::{sample_masks, MaskConfig};
    use crate::numerics::grad_check;

    fn desk_state(seed: u64) -> ModelState {
        let (enc, pred) = preset("vit-t/4").unwrap();
        ModelState::init(enc, pred, seed).unwrap()
    }

    #[test]
    fn teacher_starts_as_student_copy() {
        let s = desk_state(1);
        assert!(s.student.layout_matches(&s.teacher));
        for (a, b) in s.student.iter().zip(s.teacher.iter()) {
            assert_eq!(a.value.data(), b.value.data());
        }
    }

    #[test]
    fn ema_endpoint_cases() {
        let mut s = desk_state(2);
        let before: Vec<f32> = s.teacher.iter().flat_map(|p| p.value.data().to_vec()).collect();
        ema_update(&mut s, 1.0).unwrap();
        let after: Vec<f32> = s.teacher.iter().flat_map(|p| p.value.data().to_vec()).collect();
        assert_eq!(before, after);

        // perturb the student, then mu = 0 copies it exactly
        for p in s.student.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v += 0.25);
        }
        ema_update(&mut s, 0.0).unwrap();
        for (a, b) in s.student.iter().zip(s.teacher.iter()) {
            assert_eq!(a.value.data(), b.value.data());
        }
    }

    #[test]
    fn ema_hand_value() {
        let mut s = desk_state(3);
        s.student.get_mut("patch_proj.b").unwrap().value.data_mut()[0] = 4.0;
        s.teacher.get_mut("patch_proj.b").unwrap().value.data_mut()[0] = 2.0;
        ema_update(&mut s, 0.75).unwrap();
        let got = s.teacher.get("patch_proj.b").unwrap().value.data()[0];
        assert!((got - 2.5).abs() < 1e-7);
    }

    #[test]
    fn ema_rejects_layout_mismatch() {
        let mut s = desk_state(4);
        s.teacher = ParamStore::new();
        assert!(ema_update(&mut s, 0.5).is_err());
    }

    #[test]
    fn momentum_schedule_endpoints_and_midpoint() {
        let r = (0.996, 1.0);
        assert_eq!(momentum_schedule(0, 100, r), 0.996);
        assert_eq!(momentum_schedule(100, 100, r), 1.0);
        assert!((momentum_schedule(50, 100, r) - 0.998).abs() < 1e-12);
    }

    #[test]
    fn encode_single_token_matches_hand_composition() {
        // depth-1, 8-dim encoder on one token; rebuild the op chain by hand.
        let enc = EncoderConfig { depth: 1, dim: 8, heads: 2, mlp_ratio: 4, patch: 4 };
        let pred = PredictorConfig { depth: 1, dim: 8, heads: 2 };
        let state = ModelState::init(enc.clone(), pred, 7).unwrap();
        let img = gen_synthetic(5, 1, 1, 0.5, 4); // 4x4 image, one patch
        let tok = tokenize(&img[0], 4, 8).unwrap();
        let input = EncoderInput {
            content_patches: tok.patches.clone(),
            content_positions: tok.positions.clone(),
            condition: None,
        };

        let mut g = Graph::<f32>::inference();
        let p = ParamNodes::register(&mut g, &state.student).unwrap();
        let z = encode(&mut g, &p, &enc, &input).unwrap();
        let direct = g.tensor(z.values);

        let mut g2 = Graph::<f32>::inference();
        let p2 = ParamNodes::register(&mut g2, &state.student).unwrap();
        let px = g2.input(&input.content_patches).unwrap();
        let pos = g2.input(&input.content_positions).unwrap();
        let x = g2.matmul(px, p2.node("patch_proj.w").unwrap()).unwrap();
        let x = g2.add_bias(x, p2.node("patch_proj.b").unwrap()).unwrap();
        let x = g2.add(x, pos).unwrap();
        let h = ln_affine(&mut g2, &p2, "block0.ln1", x).unwrap();
        let q = g2.matmul(h, p2.node("block0.attn.q.w").unwrap()).unwrap();
        let q = g2.add_bias(q, p2.node("block0.attn.q.b").unwrap()).unwrap();
        let k = g2.matmul(h, p2.node("block0.attn.k.w").unwrap()).unwrap();
        let k = g2.add_bias(k, p2.node("block0.attn.k.b").unwrap()).unwrap();
        let v = g2.matmul(h, p2.node("block0.attn.v.w").unwrap()).unwrap();
        let v = g2.add_bias(v, p2.node("block0.attn.v.b").unwrap()).unwrap();
        let a = g2.mha(q, k, v, 2).unwrap();
        let a = g2.matmul(a, p2.node("block0.attn.o.w").unwrap()).unwrap();
        let a = g2.add_bias(a, p2.node("block0.attn.o.b").unwrap()).unwrap();
        let x = g2.add(x, a).unwrap();
        let h = ln_affine(&mut g2, &p2, "block0.ln2", x).unwrap();
        let m = g2.matmul(h, p2.node("block0.mlp.fc1.w").unwrap()).unwrap();
        let m = g2.add_bias(m, p2.node("block0.mlp.fc1.b").unwrap()).unwrap();
        let m = g2.gelu(m).unwrap();
        let m = g2.matmul(m, p2.node("block0.mlp.fc2.w").unwrap()).unwrap();
        let m = g2.add_bias(m, p2.node("block0.mlp.fc2.b").unwrap()).unwrap();
        let x = g2.add(x, m).unwrap();
        let y = ln_affine(&mut g2, &p2, "final_ln", x).unwrap();
        assert_eq!(direct.data(), g2.data(y));
    }

    #[test]
    fn predict_shapes_and_identical_rows() {
        let state = desk_state(9);
        let img = gen_synthetic(8, 1, 3, 0.6, 32);
        let tok = tokenize(&img[0], 4, 64).unwrap();
        let spec = sample_masks(&mut crate::data::derive_rng(1, 1), tok.grid, &MaskConfig::default()).unwrap();
        let input = build_context_input(&tok, &spec, true).unwrap();
        let pred_pos = sincos_pos_embed(tok.grid.rows, tok.grid.cols, state.pred.dim).unwrap();

        let mut g = Graph::<f32>::inference();
        let pn = ParamNodes::register(&mut g, &state.student).unwrap();
        let z = encode(&mut g, &pn, &state.enc, &input).unwrap();
        let pp = ParamNodes::register(&mut g, &state.predictor).unwrap();
        let preds = predict(&mut g, &pp, &state.pred, &z, &spec.targets, &pred_pos).unwrap();
        assert_eq!(preds.len(), spec.targets.len());
        for p in &preds {
            assert_eq!(g.dims(*p), (spec.m, 64));
        }

        // duplicate target positions produce identical prediction rows
        let twin = vec![vec![spec.targets[0][0], spec.targets[0][0]]];
        let mut g = Graph::<f32>::inference();
        let pn = ParamNodes::register(&mut g, &state.student).unwrap();
        let z = encode(&mut g, &pn, &state.enc, &input).unwrap();
        let pp = ParamNodes::register(&mut g, &state.predictor).unwrap();
        let preds = predict(&mut g, &pp, &state.pred, &z, &twin, &pred_pos).unwrap();
        let t = g.tensor(preds[0]);
        assert_eq!(t.row(0), t.row(1));
    }

    #[test]
    fn tiny_vit_grad_check() {
        // depth-2, dim-16 encoder through a scalar head.
        let enc = EncoderConfig { depth: 2, dim: 16, heads: 2, mlp_ratio: 2, patch: 4 };
        let pred = PredictorConfig { depth: 1, dim: 8, heads: 2 };
        let state = ModelState::init(enc.clone(), pred, 11).unwrap();
        let img = gen_synthetic(13, 1, 2, 0.5, 8); // 2x2 grid
        let tok = tokenize(&img[0], 4, 16).unwrap();
        let input = EncoderInput {
            content_patches: tok.patches.clone(),
            content_positions: tok.positions.clone(),
            condition: None,
        };
        let mut tgen = crate::data::derive_rng(99, 0);
        let target: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..16).map(|_| rand::Rng::gen_range(&mut tgen, -1.0..1.0)).collect())
            .collect();
        let target = Tensor::<f64>::from_rows(&target);
        let enc_cfg = enc.clone();
        let f = move |g: &mut Graph<f64>, p: &ParamNodes| {
            let z = encode(g, p, &enc_cfg, &input)?;
            let c = z.content(g)?;
            let t = g.input(&target)?;
            let d = g.sub(c, t)?;
            let sq = g.mul(d, d)?;
            g.mean_all(sq)
        };
        let err = grad_check(&f, &state.student, 1e-5, true).unwrap();
        assert!(err < 1e-4, "max rel error {err}");
    }
}

