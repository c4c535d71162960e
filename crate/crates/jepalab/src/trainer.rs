//! Pretraining loop: latent-prediction loss, AdamW, schedules,
//! checkpointing, and CSV logging.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_params, store_params, Container, RngState};
use crate::conditioning::{build_context_input, build_target_input};
use crate::config::{fmt_g, RunConfig};
use crate::data::{sincos_pos_embed, tokenize, GridShape, TokenizedImage};
use crate::error::{Error, Result};
use crate::masking::{sample_masks, MaskSpec};
use crate::metrics::{embed_dataset, rankme, EmbedMode};
use crate::model::{ema_update, encode, momentum_schedule, predict, preset, ModelState};
use crate::numerics::{Graph, NodeId, ParamNodes, ParamStore, Scalar, Tensor};

pub const LOG_HEADER: &str = "step,epoch,loss,lr,wd,mu,rankme";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    SmoothL1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetNorm {
    /// Targets taken after the teacher's final layer norm.
    PostLn,
    /// Targets taken before the final layer norm.
    Raw,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: (f64, f64),
    pub ema_momentum: (f64, f64),
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub loss: LossKind,
    pub smooth_l1_delta: f64,
    pub target_norm: TargetNorm,
    pub lr_floor: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 64,
            max_lr: 1e-3,
            warmup_epochs: 5,
            weight_decay: (0.04, 0.4),
            ema_momentum: (0.996, 1.0),
            log_every: 10,
            checkpoint_every: 200,
            loss: LossKind::Mse,
            smooth_l1_delta: 1.0,
            target_norm: TargetNorm::PostLn,
            lr_floor: 1e-6,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "train.warmup_epochs {} must be < epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.log_every < 1 {
            return Err(Error::Config("train.log_every must be >= 1".into()));
        }
        if self.max_lr <= 0.0 {
            return Err(Error::Config("train.max_lr must be > 0".into()));
        }
        Ok(())
    }
}

/// Mean over blocks, tokens, and channels of the per-element loss kernel.
pub fn jepa_loss<S: Scalar>(
    g: &mut Graph<S>,
    preds: &[NodeId],
    targets: &[Tensor<S>],
    kind: LossKind,
    smooth_l1_delta: f64,
) -> Result<NodeId> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "jepa_loss",
            details: format!("{} predictions vs {} targets", preds.len(), targets.len()),
        });
    }
    let mut total_elems = 0usize;
    let mut acc: Option<NodeId> = None;
    for (&p, t) in preds.iter().zip(targets) {
        let (r, c) = g.dims(p);
        if t.shape() != [r, c] {
            return Err(Error::ShapeMismatch {
                op: "jepa_loss",
                details: format!("prediction [{r}x{c}] vs target {:?}", t.shape()),
            });
        }
        total_elems += r * c;
        let tn = g.input(t)?;
        let d = g.sub(p, tn)?;
        let e = match kind {
            LossKind::Mse => g.mul(d, d)?,
            LossKind::SmoothL1 => g.huber(d, S::from_f64(smooth_l1_delta))?,
        };
        let s = g.sum_all(e)?;
        acc = Some(match acc {
            Some(prev) => g.add(prev, s)?,
            None => s,
        });
    }
    g.scale(acc.expect("nonempty"), S::ONE / S::from_f64(total_elems as f64))
}

/// Linear warmup to `max_lr`, then cosine decay to `floor` at the last step.
pub fn lr_schedule(step: u64, total: u64, warmup: u64, max_lr: f64, floor: f64) -> f64 {
    if warmup > 0 && step < warmup {
        return max_lr * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return max_lr;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).clamp(0.0, 1.0);
    floor + 0.5 * (max_lr - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Cosine ramp from `range.0` at step 0 to `range.1` at the last step.
pub fn wd_schedule(step: u64, total: u64, range: (f64, f64)) -> f64 {
    if total == 0 {
        return range.1;
    }
    let progress = (step.min(total)) as f64 / total as f64;
    range.1 + 0.5 * (range.0 - range.1) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// First and second moments aligned with a store's parameter order.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        AdamState {
            m: store.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect(),
            v: store.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect(),
            t: 0,
        }
    }
}

/// One AdamW step over every parameter of the store, reading the gradient
/// buffers. Decoupled weight decay scales by lr.
pub fn optimizer_step(
    params: &mut ParamStore,
    state: &mut AdamState,
    lr: f64,
    wd: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Invalid("optimizer state does not match parameter store".into()));
    }
    state.t += 1;
    let (b1, b2) = betas;
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for ((pv, &g), (mi, vi)) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(p.grad.data())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            let g = g as f64;
            let mnew = b1 * *mi as f64 + (1.0 - b1) * g;
            let vnew = b2 * *vi as f64 + (1.0 - b2) * g * g;
            *mi = mnew as f32;
            *vi = vnew as f32;
            let mhat = mnew / bc1;
            let vhat = vnew / bc2;
            let old = *pv as f64;
            *pv = (old - lr * mhat / (vhat.sqrt() + eps) - lr * wd * old) as f32;
        }
    }
    Ok(())
}

fn clip_grads(stores: &mut [&mut ParamStore], max_norm: f64) {
    let mut sq = 0f64;
    for store in stores.iter() {
        for p in store.iter() {
            for &g in p.grad.data() {
                sq += (g as f64) * (g as f64);
            }
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = (max_norm / norm) as f32;
        for store in stores.iter_mut() {
            for p in store.iter_mut() {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= scale);
            }
        }
    }
}

/// One optimization step over a batch: per image, teacher targets without
/// gradient, student + predictor forward/backward, then AdamW on student and
/// predictor and the EMA update on the teacher.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut ModelState,
    adam_student: &mut AdamState,
    adam_predictor: &mut AdamState,
    batch: &[&TokenizedImage],
    specs: &[MaskSpec],
    tcfg: &TrainConfig,
    conditioning: bool,
    pred_positions: &Tensor<f32>,
    lr: f64,
    wd: f64,
    mu: f64,
) -> Result<f32> {
    if batch.is_empty() || batch.len() != specs.len() {
        return Err(Error::Invalid(format!(
            "batch of {} images vs {} mask specs",
            batch.len(),
            specs.len()
        )));
    }
    model.student.zero_grads();
    model.predictor.zero_grads();
    let scale = 1.0 / batch.len() as f32;
    let mut total = 0f64;
    for (img, spec) in batch.iter().zip(specs) {
        // Teacher path: forward-only graph, so nothing reaches its params.
        let t_input = build_target_input(img, spec, conditioning)?;
        let mut tg = Graph::<f32>::inference();
        let tn = ParamNodes::register(&mut tg, &model.teacher)?;
        let tz = encode(&mut tg, &tn, &model.enc, &t_input)?;
        let content = match tcfg.target_norm {
            TargetNorm::PostLn => tz.content(&mut tg)?,
            TargetNorm::Raw => tz.content_pre_norm(&mut tg)?,
        };
        let teacher_out = tg.tensor(content);
        let targets: Vec<Tensor<f32>> =
            spec.targets.iter().map(|b| teacher_out.gather_rows(b)).collect();

        let s_input = build_context_input(img, spec, conditioning)?;
        let mut g = Graph::<f32>::recording();
        let sn = ParamNodes::register(&mut g, &model.student)?;
        let sz = encode(&mut g, &sn, &model.enc, &s_input)?;
        let pn = ParamNodes::register(&mut g, &model.predictor)?;
        let preds = predict(&mut g, &pn, &model.pred, &sz, &spec.targets, pred_positions)?;
        let loss = jepa_loss(&mut g, &preds, &targets, tcfg.loss, tcfg.smooth_l1_delta)?;
        total += g.scalar_value(loss) as f64;
        let grads = g.backward(loss)?;
        sn.accumulate_grads(&grads, scale, &mut model.student)?;
        pn.accumulate_grads(&grads, scale, &mut model.predictor)?;
    }
    let mean_loss = (total / batch.len() as f64) as f32;
    if !mean_loss.is_finite() {
        return Err(Error::Invalid("non-finite loss".into()));
    }
    if let Some(c) = tcfg.grad_clip {
        let mut stores = [&mut model.student, &mut model.predictor];
        clip_grads(&mut stores, c);
    }
    optimizer_step(&mut model.student, adam_student, lr, wd, tcfg.adam_betas, tcfg.adam_eps)?;
    optimizer_step(&mut model.predictor, adam_predictor, lr, wd, tcfg.adam_betas, tcfg.adam_eps)?;
    ema_update(model, mu as f32)?;
    Ok(mean_loss)
}

/// Everything that must survive an interrupt for bit-exact resumption.
pub struct TrainerState {
    pub model: ModelState,
    pub adam_student: AdamState,
    pub adam_predictor: AdamState,
    pub mask_rng: ChaCha8Rng,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: serde_json::Value,
    seed: u64,
    step: u64,
    adam_student_t: u64,
    adam_predictor_t: u64,
    mask_rng: RngState,
}

pub fn save_checkpoint(path: &Path, cfg: &RunConfig, seed: u64, st: &TrainerState) -> Result<()> {
    let meta = CheckpointMeta {
        config: cfg.to_value(),
        seed,
        step: st.step,
        adam_student_t: st.adam_student.t,
        adam_predictor_t: st.adam_predictor.t,
        mask_rng: RngState::capture(&st.mask_rng),
    };
    let meta = serde_json::to_value(&meta).map_err(|e| Error::Container(e.to_string()))?;
    let mut c = Container::new("checkpoint", meta);
    store_params(&mut c, "student", &st.model.student);
    store_params(&mut c, "teacher", &st.model.teacher);
    store_params(&mut c, "predictor", &st.model.predictor);
    for (prefix, adam, store) in [
        ("student", &st.adam_student, &st.model.student),
        ("predictor", &st.adam_predictor, &st.model.predictor),
    ] {
        for (i, p) in store.iter().enumerate() {
            c.add_tensor(format!("opt/{prefix}/m/{}", p.name), &adam.m[i]);
            c.add_tensor(format!("opt/{prefix}/v/{}", p.name), &adam.v[i]);
        }
    }
    c.write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(RunConfig, u64, TrainerState)> {
    let c = Container::read(path)?;
    if c.header.kind != "checkpoint" {
        return Err(Error::Container(format!("expected a checkpoint, got {}", c.header.kind)));
    }
    let meta: CheckpointMeta = serde_json::from_value(c.header.meta.clone())
        .map_err(|e| Error::Container(e.to_string()))?;
    let cfg = RunConfig::from_value(meta.config)?;
    let (enc, pred) = preset(&cfg.model)?;
    let mut model = ModelState::init(enc, pred, meta.seed)?;
    load_params(&c, "student", &mut model.student)?;
    load_params(&c, "teacher", &mut model.teacher)?;
    load_params(&c, "predictor", &mut model.predictor)?;
    let mut adam_student = AdamState::new(&model.student);
    let mut adam_predictor = AdamState::new(&model.predictor);
    for (prefix, adam, store) in [
        ("student", &mut adam_student, &model.student),
        ("predictor", &mut adam_predictor, &model.predictor),
    ] {
        for (i, p) in store.iter().enumerate() {
            adam.m[i] = c.tensor(&format!("opt/{prefix}/m/{}", p.name))?;
            adam.v[i] = c.tensor(&format!("opt/{prefix}/v/{}", p.name))?;
        }
    }
    adam_student.t = meta.adam_student_t;
    adam_predictor.t = meta.adam_predictor_t;
    Ok((
        cfg,
        meta.seed,
        TrainerState {
            model,
            adam_student,
            adam_predictor,
            mask_rng: meta.mask_rng.restore()?,
            step: meta.step,
        },
    ))
}

pub struct PretrainSummary {
    pub out_dir: PathBuf,
    pub steps: u64,
    pub final_loss: f32,
    pub checkpoints: Vec<PathBuf>,
}

/// Tokenized train/eval split of the configured dataset.
pub struct PreparedData {
    pub train: Vec<TokenizedImage>,
    pub eval: Vec<TokenizedImage>,
    pub grid: GridShape,
}

pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let (enc, _) = preset(&cfg.model)?;
    let images = cfg.data.load()?;
    if images.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    if cfg.data.eval_count >= images.len() {
        return Err(Error::Config(format!(
            "data.eval_count {} leaves no training images (dataset size {})",
            cfg.data.eval_count,
            images.len()
        )));
    }
    let split = images.len() - cfg.data.eval_count;
    let mut train = Vec::with_capacity(split);
    let mut eval = Vec::with_capacity(cfg.data.eval_count);
    for (i, img) in images.iter().enumerate() {
        let tok = tokenize(img, enc.patch, enc.dim)?;
        if i < split {
            train.push(tok);
        } else {
            eval.push(tok);
        }
    }
    let grid = train[0].grid;
    Ok(PreparedData { train, eval, grid })
}

fn epoch_permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = crate::data::derive_rng(seed, 0xE90C4 ^ epoch.wrapping_mul(0x9e37));
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rand::Rng::gen_range(&mut rng, 0..=i));
    }
    order
}

struct LogWriter {
    file: std::fs::File,
    path: PathBuf,
}

impl LogWriter {
    fn open(path: &Path, fresh: bool) -> Result<Self> {
        let exists = path.exists();
        let mut opts = std::fs::OpenOptions::new();
        if fresh {
            opts.write(true).create(true).truncate(true);
        } else {
            opts.append(true).create(true);
        }
        let mut file = opts.open(path).map_err(|e| Error::io(path, e))?;
        if fresh || !exists {
            writeln!(file, "{LOG_HEADER}").map_err(|e| Error::io(path, e))?;
        }
        Ok(LogWriter { file, path: path.to_path_buf() })
    }

    fn row(
        &mut self,
        step: u64,
        epoch: u64,
        loss: f32,
        lr: f64,
        wd: f64,
        mu: f64,
        rankme: Option<f64>,
    ) -> Result<()> {
        let rm = rankme.map(fmt_g).unwrap_or_default();
        writeln!(
            self.file,
            "{step},{epoch},{},{},{},{},{rm}",
            fmt_g(loss as f64),
            fmt_g(lr),
            fmt_g(wd),
            fmt_g(mu)
        )
        .map_err(|e| Error::io(&self.path, e))
    }
}

/// Start pretraining from scratch into `out_dir`.
pub fn pretrain(cfg: &RunConfig, seed: u64, out_dir: &Path) -> Result<PretrainSummary> {
    cfg.validate()?;
    let (enc, pred) = preset(&cfg.model)?;
    let model = ModelState::init(enc, pred, seed)?;
    let adam_student = AdamState::new(&model.student);
    let adam_predictor = AdamState::new(&model.predictor);
    let state = TrainerState {
        model,
        adam_student,
        adam_predictor,
        mask_rng: crate::data::derive_rng(seed, 0x3A5C),
        step: 0,
    };
    run_loop(cfg, seed, out_dir, state, true)
}

/// Continue a checkpointed run to its configured step count. Output lands in
/// the checkpoint's directory; log rows are appended.
pub fn resume_pretrain(ckpt: &Path) -> Result<PretrainSummary> {
    let (cfg, seed, state) = load_checkpoint(ckpt)?;
    let out_dir = ckpt
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    run_loop(&cfg, seed, &out_dir, state, false)
}

fn run_loop(
    cfg: &RunConfig,
    seed: u64,
    out_dir: &Path,
    mut st: TrainerState,
    fresh: bool,
) -> Result<PretrainSummary> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let data = prepare_data(cfg)?;
    let tcfg = &cfg.train;
    let n_train = data.train.len();
    let batch_size = tcfg.batch_size.min(n_train);
    let steps_per_epoch = (n_train / batch_size).max(1) as u64;
    let total_steps = tcfg.epochs as u64 * steps_per_epoch;
    let warmup_steps = tcfg.warmup_epochs as u64 * steps_per_epoch;
    let conditioning = cfg.conditioning.enabled();
    let pred_positions = sincos_pos_embed(data.grid.rows, data.grid.cols, st.model.pred.dim)?;

    if fresh {
        let snapshot = {
            let mut c = cfg.clone();
            c.seeds = vec![seed];
            c
        };
        let cfg_path = out_dir.join("config.json");
        let text = serde_json::to_string_pretty(&snapshot.to_value())
            .map_err(|e| Error::Container(e.to_string()))?;
        std::fs::write(&cfg_path, text).map_err(|e| Error::io(&cfg_path, e))?;
    }
    let mut log = LogWriter::open(&out_dir.join("log.csv"), fresh)?;
    let mut checkpoints = Vec::new();
    let mut final_loss = f32::NAN;

    let mut epoch_order: Option<(u64, Vec<usize>)> = None;
    for step in st.step..total_steps {
        let epoch = step / steps_per_epoch;
        let slot = (step % steps_per_epoch) as usize;
        if epoch_order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            epoch_order = Some((epoch, epoch_permutation(seed, epoch, n_train)));
        }
        let order = &epoch_order.as_ref().expect("set above").1;
        let indices = &order[slot * batch_size..(slot + 1) * batch_size];
        let batch: Vec<&TokenizedImage> = indices.iter().map(|&i| &data.train[i]).collect();
        let mut specs = Vec::with_capacity(batch.len());
        for img in &batch {
            specs.push(sample_masks(&mut st.mask_rng, img.grid, &cfg.mask)?);
        }

        let lr = lr_schedule(step, total_steps, warmup_steps, tcfg.max_lr, tcfg.lr_floor);
        let wd = wd_schedule(step, total_steps, tcfg.weight_decay);
        let mu = momentum_schedule(step, total_steps, tcfg.ema_momentum);

        let loss = train_step(
            &mut st.model,
            &mut st.adam_student,
            &mut st.adam_predictor,
            &batch,
            &specs,
            tcfg,
            conditioning,
            &pred_positions,
            lr,
            wd,
            mu,
        )
        .map_err(|e| Error::TrainingAborted {
            step,
            lr,
            mu,
            message: e.to_string(),
        })?;
        final_loss = loss;
        st.step = step + 1;

        let is_last = st.step == total_steps;
        let ckpt_due =
            is_last || (tcfg.checkpoint_every > 0 && st.step % tcfg.checkpoint_every as u64 == 0);
        let log_due = ckpt_due || step % tcfg.log_every as u64 == 0;
        let mut rank_cell = None;
        if ckpt_due {
            if data.eval.len() >= 2 {
                let z = embed_dataset(
                    &st.model,
                    &data.eval,
                    EmbedMode::Teacher,
                    cfg.inference_pool_kernel,
                    cfg.inference_pool_stride,
                    conditioning,
                )?;
                rank_cell = Some(rankme(&z, cfg.metrics.rankme_eps)?);
            }
            let path = out_dir.join(format!("ckpt_{:07}.ckpt", st.step));
            save_checkpoint(&path, cfg, seed, &st)?;
            checkpoints.push(path);
        }
        if log_due {
            log.row(step, epoch, loss, lr, wd, mu, rank_cell)?;
        }
    }

    // A zero-step run (resume at completion) still reports its checkpoint.
    if st.step >= total_steps && checkpoints.is_empty() {
        let path = out_dir.join(format!("ckpt_{:07}.ckpt", total_steps));
        if path.exists() {
            checkpoints.push(path);
        }
    }

    Ok(PretrainSummary {
        out_dir: out_dir.to_path_buf(),
        steps: total_steps,
        final_loss,
        checkpoints,
    })
}
