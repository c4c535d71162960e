//! Analytic FLOP accounting for the conditioning overhead.
//!
//! Two independent counters cover the same quantity: a closed-form expression
//! and an op-by-op enumeration of every matmul in a training step. Both count
//! attention and MLP matmul FLOPs (2*M*K*N per `[MxK]@[KxN]` product), with
//! backward costed as the usual two extra matmuls per forward matmul for the
//! gradient-carrying towers (student encoder, predictor) and forward-only for
//! the teacher.
//!
//! Sequence lengths come from representative mask statistics: the mean of
//! each scale range, with the full context block retained (no target-removal
//! correction), so the counter stays a closed-form function of the config.

/// Architecture plus masking statistics that determine sequence lengths.
#[derive(Clone, Debug)]
pub struct FlopsConfig {
    pub tokens: usize,
    pub dim: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub pred_dim: usize,
    pub pred_depth: usize,
    pub k: usize,
    pub target_scale: (f64, f64),
    pub context_scale: (f64, f64),
    pub conditioning: bool,
}

impl FlopsConfig {
    /// Full-scale ViT-L/16 pretraining at 224px (14x14 patch grid).
    pub fn full_scale_vitl16() -> Self {
        FlopsConfig {
            tokens: 196,
            dim: 1024,
            depth: 24,
            mlp_ratio: 4,
            pred_dim: 384,
            pred_depth: 12,
            k: 4,
            target_scale: (0.15, 0.2),
            context_scale: (0.85, 1.0),
            conditioning: true,
        }
    }

    /// Desk preset: vit-t/4 on a 32px image (8x8 grid).
    pub fn desk() -> Self {
        FlopsConfig {
            tokens: 64,
            dim: 64,
            depth: 4,
            mlp_ratio: 4,
            pred_dim: 32,
            pred_depth: 2,
            k: 4,
            target_scale: (0.15, 0.2),
            context_scale: (0.85, 1.0),
            conditioning: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqLens {
    pub student: usize,
    pub teacher: usize,
    pub predictor_per_block: usize,
    pub m: usize,
    pub context: usize,
    pub student_extra: usize,
    pub teacher_extra: usize,
}

/// Representative sequence lengths for one training step.
pub fn representative_lens(cfg: &FlopsConfig, conditioning: bool) -> SeqLens {
    let t = cfg.tokens;
    let mean = |(lo, hi): (f64, f64)| 0.5 * (lo + hi);
    let m = ((mean(cfg.target_scale) * t as f64).round() as usize).max(2);
    let kernel = (m / 2).max(1);
    let per_block = m / kernel;
    let context = ((mean(cfg.context_scale) * t as f64).round() as usize).clamp(1, t);
    let student_extra = if conditioning { cfg.k * per_block } else { 0 };
    let teacher_extra = if conditioning { context / kernel } else { 0 };
    SeqLens {
        student: context + student_extra,
        teacher: t + teacher_extra,
        predictor_per_block: context + m,
        m,
        context,
        student_extra,
        teacher_extra,
    }
}

/// Closed form: per layer 2*(4 + 2*mlp_ratio)*S*d^2 + 4*S^2*d FLOPs
/// (qkv + output projection + both MLP matmuls + the two attention products).
fn tower_flops_closed(s: usize, d: usize, depth: usize, mlp_ratio: usize) -> f64 {
    let (s, d) = (s as f64, d as f64);
    depth as f64 * (2.0 * (4.0 + 2.0 * mlp_ratio as f64) * s * d * d + 4.0 * s * s * d)
}

fn step_flops_closed(cfg: &FlopsConfig, lens: &SeqLens) -> f64 {
    let student = tower_flops_closed(lens.student, cfg.dim, cfg.depth, cfg.mlp_ratio);
    let teacher = tower_flops_closed(lens.teacher, cfg.dim, cfg.depth, cfg.mlp_ratio);
    let pred = tower_flops_closed(
        lens.predictor_per_block,
        cfg.pred_dim,
        cfg.pred_depth,
        cfg.mlp_ratio,
    );
    3.0 * student + teacher + 3.0 * cfg.k as f64 * pred
}

/// Conditioned-over-unconditioned training FLOP ratio (closed form).
pub fn flops_overhead(cfg: &FlopsConfig) -> f64 {
    let cond = representative_lens(cfg, cfg.conditioning);
    let base = representative_lens(cfg, false);
    step_flops_closed(cfg, &cond) / step_flops_closed(cfg, &base)
}

/// Second, independent counter: walk the forward pass, emit every matmul as
/// an (M, K, N) triple, and for gradient-carrying towers also emit the two
/// backward products per forward matmul.
fn tower_matmuls(s: usize, d: usize, depth: usize, mlp_ratio: usize, out: &mut Vec<(usize, usize, usize)>) {
    for _ in 0..depth {
        out.push((s, d, d)); // q
        out.push((s, d, d)); // k
        out.push((s, d, d)); // v
        out.push((s, d, s)); // scores = q @ k^T
        out.push((s, s, d)); // probs @ v
        out.push((s, d, d)); // output projection
        out.push((s, d, mlp_ratio * d)); // fc1
        out.push((s, mlp_ratio * d, d)); // fc2
    }
}

fn count(matmuls: &[(usize, usize, usize)], with_backward: bool) -> f64 {
    let mut total = 0.0;
    for &(m, k, n) in matmuls {
        total += 2.0 * (m as f64) * (k as f64) * (n as f64); // forward
        if with_backward {
            total += 2.0 * (m as f64) * (n as f64) * (k as f64); // d_lhs = d_out @ rhs^T
            total += 2.0 * (k as f64) * (m as f64) * (n as f64); // d_rhs = lhs^T @ d_out
        }
    }
    total
}

fn step_flops_enumerated(cfg: &FlopsConfig, lens: &SeqLens) -> f64 {
    let mut student = Vec::new();
    tower_matmuls(lens.student, cfg.dim, cfg.depth, cfg.mlp_ratio, &mut student);
    let mut teacher = Vec::new();
    tower_matmuls(lens.teacher, cfg.dim, cfg.depth, cfg.mlp_ratio, &mut teacher);
    let mut pred = Vec::new();
    for _ in 0..cfg.k {
        tower_matmuls(lens.predictor_per_block, cfg.pred_dim, cfg.pred_depth, cfg.mlp_ratio, &mut pred);
    }
    count(&student, true) + count(&teacher, false) + count(&pred, true)
}

/// Same ratio as [`flops_overhead`], computed by op enumeration.
pub fn flops_overhead_enumerated(cfg: &FlopsConfig) -> f64 {
    let cond = representative_lens(cfg, cfg.conditioning);
    let base = representative_lens(cfg, false);
    step_flops_enumerated(cfg, &cond) / step_flops_enumerated(cfg, &base)
}
