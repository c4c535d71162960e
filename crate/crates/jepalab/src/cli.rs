//! Command implementations behind the `jepalab` binary: experiment drivers
//! and plumbing subcommands. Pure functions of (config, flags, seed).

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::checkpoint::Container;
use crate::config::{fmt_g, Conditioning, DataKind, RunConfig};
use crate::data::{export_dataset, gen_synthetic};
use crate::error::{Error, Result};
use crate::metrics::{embed_dataset, lidar, lidar_views, rankme, EmbedMode, EmbeddingMatrix};
use crate::model::ModelState;
use crate::probe::{evaluate_probe, train_probe};
use crate::trainer::{load_checkpoint, prepare_data, pretrain, resume_pretrain, PreparedData, PretrainSummary};

pub const SWEEP_HEADER: &str = "variant,lo,hi,seed,top1,rankme,status";
pub const CURVE_HEADER: &str = "step,variant,top1";
pub const ABLATE_HEADER: &str = "kernel,stride,top1";
pub const PROBE_HEADER: &str = "split,top1";

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Per-seed output directory: the configured dir itself for a single seed,
/// `seed_<s>` subdirectories otherwise.
pub fn seed_dir(cfg: &RunConfig, seed: u64) -> PathBuf {
    if cfg.seeds.len() == 1 {
        cfg.out_dir.clone()
    } else {
        cfg.out_dir.join(format!("seed_{seed}"))
    }
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<Vec<PretrainSummary>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        out.push(pretrain(cfg, seed, &seed_dir(cfg, seed))?);
    }
    Ok(out)
}

pub fn cmd_resume(ckpt: &Path) -> Result<PretrainSummary> {
    resume_pretrain(ckpt)
}

/// Frozen-backbone probe results on the train/eval split.
pub struct ProbeOutcome {
    pub train_top1: f64,
    pub eval_top1: f64,
}

pub fn probe_state(
    cfg: &RunConfig,
    seed: u64,
    state: &ModelState,
    data: &PreparedData,
    kernel: usize,
    stride: usize,
) -> Result<ProbeOutcome> {
    if data.eval.is_empty() {
        return Err(Error::Config(
            "probing needs a held-out split; set data.eval_count > 0".into(),
        ));
    }
    let conditioning = cfg.conditioning.enabled();
    let f_train = embed_dataset(state, &data.train, EmbedMode::Teacher, kernel, stride, conditioning)?;
    let f_eval = embed_dataset(state, &data.eval, EmbedMode::Teacher, kernel, stride, conditioning)?;
    let y_train: Vec<usize> = data.train.iter().map(|t| t.label).collect();
    let y_eval: Vec<usize> = data.eval.iter().map(|t| t.label).collect();
    let mut rng = crate::data::derive_rng(seed, 0x9505);
    let head = train_probe(&f_train, &y_train, &cfg.probe, &mut rng)?;
    Ok(ProbeOutcome {
        train_top1: evaluate_probe(&head, &f_train, &y_train)?,
        eval_top1: evaluate_probe(&head, &f_eval, &y_eval)?,
    })
}

/// Probe a checkpoint; optional dataset-directory and epoch overrides.
pub fn cmd_probe(
    ckpt: &Path,
    dataset: Option<&Path>,
    epochs: Option<usize>,
    out_csv: &Path,
) -> Result<ProbeOutcome> {
    let (mut cfg, seed, st) = load_checkpoint(ckpt)?;
    if let Some(dir) = dataset {
        cfg.data.kind = DataKind::Dir;
        cfg.data.path = Some(dir.to_path_buf());
    }
    if let Some(e) = epochs {
        cfg.probe.epochs = e;
    }
    let data = prepare_data(&cfg)?;
    let outcome = probe_state(
        &cfg,
        seed,
        &st.model,
        &data,
        cfg.inference_pool_kernel,
        cfg.inference_pool_stride,
    )?;
    let text = format!(
        "{PROBE_HEADER}\ntrain,{}\neval,{}\n",
        fmt_g(outcome.train_top1),
        fmt_g(outcome.eval_top1)
    );
    write_text(out_csv, &text)?;
    Ok(outcome)
}

/// Metric values computed from an embedding dump.
pub struct MetricsOutcome {
    pub rankme: f64,
    pub lidar: Option<f64>,
}

pub fn cmd_metrics(input: &Path, rankme_eps: f64, lidar_delta: f64) -> Result<MetricsOutcome> {
    let c = Container::read(input)?;
    if c.header.kind != "embeddings" {
        return Err(Error::Container(format!(
            "expected an embeddings dump, got {}",
            c.header.kind
        )));
    }
    let z = c.tensor("embeddings")?;
    if z.rows() < 2 {
        return Err(Error::DegenerateEmbeddings(format!(
            "need at least 2 embeddings, got {}",
            z.rows()
        )));
    }
    let grouping = match (&c.header.meta["groups"], &c.header.meta["views"]) {
        (serde_json::Value::Number(n), serde_json::Value::Number(q)) => Some((
            n.as_u64().unwrap_or(0) as usize,
            q.as_u64().unwrap_or(0) as usize,
        )),
        _ => None,
    };
    let rm = rankme(&z, rankme_eps)?;
    let li = match grouping {
        Some((n, q)) => {
            let emb = EmbeddingMatrix::new(z, Some((n, q)))?;
            Some(lidar(&emb, lidar_delta, rankme_eps)?)
        }
        None => None,
    };
    Ok(MetricsOutcome { rankme: rm, lidar: li })
}

/// Dump embeddings (optionally grouped views for the LDA metric) in the
/// container format.
pub fn cmd_export_embeddings(
    ckpt: &Path,
    dataset: Option<&Path>,
    out: &Path,
    mode: EmbedMode,
    views: Option<usize>,
) -> Result<()> {
    let (mut cfg, seed, st) = load_checkpoint(ckpt)?;
    if let Some(dir) = dataset {
        cfg.data.kind = DataKind::Dir;
        cfg.data.path = Some(dir.to_path_buf());
    }
    let data = prepare_data(&cfg)?;
    let conditioning = cfg.conditioning.enabled();
    let budget = cfg.metrics.sample_count.max(2);
    let pool: Vec<_> = data.train.iter().chain(data.eval.iter()).collect();

    let (tensor, meta) = match views {
        Some(q) => {
            if q < 2 {
                return Err(Error::Config("views must be >= 2 for grouped dumps".into()));
            }
            let groups = (budget / q).min(pool.len()).max(2);
            let subset: Vec<_> = pool[..groups].iter().map(|t| (*t).clone()).collect();
            let mut rng = crate::data::derive_rng(seed, 0x71D42);
            let emb = lidar_views(&st.model, &subset, q, &mut rng, &cfg.mask, mode, conditioning)?;
            (emb.z, serde_json::json!({ "groups": groups, "views": q }))
        }
        None => {
            let count = budget.min(pool.len());
            let subset: Vec<_> = pool[..count].iter().map(|t| (*t).clone()).collect();
            let z = embed_dataset(
                &st.model,
                &subset,
                mode,
                cfg.inference_pool_kernel,
                cfg.inference_pool_stride,
                conditioning,
            )?;
            (z, serde_json::json!({}))
        }
    };
    let mut c = Container::new("embeddings", meta);
    c.add_tensor("embeddings", &tensor);
    c.write(out)
}

pub fn cmd_gen_synth(
    seed: u64,
    n: usize,
    corr: f64,
    grid_objects: usize,
    image_size: usize,
    out: &Path,
) -> Result<()> {
    if !(0.0..=1.0).contains(&corr) {
        return Err(Error::Config(format!("corr must be in [0,1], got {corr}")));
    }
    let images = gen_synthetic(seed, n, grid_objects, corr, image_size);
    export_dataset(&images, out)
}

/// One row per (context range, variant, seed): pretrain, probe, score.
pub fn cmd_sweep_context(cfg: &RunConfig, ranges: &[(f64, f64)], out_csv: &Path) -> Result<()> {
    if ranges.is_empty() {
        return Err(Error::Config("sweep needs at least one context range".into()));
    }
    cfg.validate()?;
    let mut rows = vec![SWEEP_HEADER.to_string()];
    for &(lo, hi) in ranges {
        for variant in [Conditioning::Off, Conditioning::On] {
            for &seed in &cfg.seeds {
                let mut sub = cfg.clone();
                sub.mask.context_scale = (lo, hi);
                sub.conditioning = variant;
                sub.seeds = vec![seed];
                sub.train.checkpoint_every = 0; // final checkpoint only
                sub.out_dir = cfg.out_dir.join(format!(
                    "sweep_ctx_{}_{}/{}/seed_{seed}",
                    fmt_g(lo),
                    fmt_g(hi),
                    variant.variant_name()
                ));
                sub.mask.validate()?;
                let row = match run_and_score(&sub, seed) {
                    Ok((top1, rm)) => format!(
                        "{},{},{},{seed},{},{},ok",
                        variant.variant_name(),
                        fmt_g(lo),
                        fmt_g(hi),
                        fmt_g(top1),
                        fmt_g(rm)
                    ),
                    Err(e) if is_mask_collapse(&e) => format!(
                        "{},{},{},{seed},,,collapsed=config",
                        variant.variant_name(),
                        fmt_g(lo),
                        fmt_g(hi)
                    ),
                    Err(e) => return Err(e),
                };
                rows.push(row);
            }
        }
    }
    rows.push(String::new());
    write_text(out_csv, &rows.join("\n"))
}

fn is_mask_collapse(e: &Error) -> bool {
    match e {
        Error::DegenerateMask { .. } => true,
        Error::TrainingAborted { message, .. } => message.contains("degenerate mask config"),
        _ => false,
    }
}

/// Pretrain one run and score it: probe eval top-1 plus end-of-training
/// soft effective rank on the held-out embeddings.
pub fn run_and_score(cfg: &RunConfig, seed: u64) -> Result<(f64, f64)> {
    let summary = pretrain(cfg, seed, &seed_dir(cfg, seed))?;
    let last = summary
        .checkpoints
        .last()
        .ok_or_else(|| Error::Invalid("run produced no checkpoint".into()))?;
    let (cfg2, seed2, st) = load_checkpoint(last)?;
    let data = prepare_data(&cfg2)?;
    let outcome = probe_state(
        &cfg2,
        seed2,
        &st.model,
        &data,
        cfg2.inference_pool_kernel,
        cfg2.inference_pool_stride,
    )?;
    let z = embed_dataset(
        &st.model,
        &data.eval,
        EmbedMode::Teacher,
        cfg2.inference_pool_kernel,
        cfg2.inference_pool_stride,
        cfg2.conditioning.enabled(),
    )?;
    let rm = rankme(&z, cfg2.metrics.rankme_eps)?;
    Ok((outcome.eval_top1, rm))
}

/// Probe every checkpoint of a finished run: `step,variant,top1`.
pub fn cmd_efficiency_curve(run_dir: &Path, dataset: Option<&Path>, out_csv: &Path) -> Result<()> {
    let mut ckpts: Vec<PathBuf> = std::fs::read_dir(run_dir)
        .map_err(|e| Error::io(run_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("ckpt_") && n.ends_with(".ckpt"))
                .unwrap_or(false)
        })
        .collect();
    ckpts.sort();
    if ckpts.is_empty() {
        return Err(Error::Invalid(format!(
            "no checkpoints found in {}",
            run_dir.display()
        )));
    }
    let mut rows = vec![CURVE_HEADER.to_string()];
    for ckpt in &ckpts {
        let (mut cfg, seed, st) = load_checkpoint(ckpt)?;
        if let Some(dir) = dataset {
            cfg.data.kind = DataKind::Dir;
            cfg.data.path = Some(dir.to_path_buf());
        }
        let data = prepare_data(&cfg)?;
        let outcome = probe_state(
            &cfg,
            seed,
            &st.model,
            &data,
            cfg.inference_pool_kernel,
            cfg.inference_pool_stride,
        )?;
        rows.push(format!(
            "{},{},{}",
            st.step,
            cfg.conditioning.variant_name(),
            fmt_g(outcome.eval_top1)
        ));
    }
    rows.push(String::new());
    write_text(out_csv, &rows.join("\n"))
}

/// Re-extract inference features under each (kernel, stride), retrain the
/// probe, and record eval top-1. Pairs that do not fit the grid produce a
/// warning row with an empty top1 cell.
pub fn cmd_ablate_pooling(
    ckpt: &Path,
    kernels: &[usize],
    strides: &[usize],
    out_csv: &Path,
) -> Result<()> {
    if kernels.is_empty() || strides.is_empty() {
        return Err(Error::Config("kernel and stride lists must be non-empty".into()));
    }
    let (cfg, seed, st) = load_checkpoint(ckpt)?;
    let data = prepare_data(&cfg)?;
    let grid = data.grid;
    let mut rows = vec![ABLATE_HEADER.to_string()];
    for &k in kernels {
        for &s in strides {
            if k == 0 || s == 0 || k > grid.rows || k > grid.cols || s > grid.rows || s > grid.cols {
                eprintln!("warning: pooling kernel={k} stride={s} does not fit grid {}x{}, skipped", grid.rows, grid.cols);
                rows.push(format!("{k},{s},"));
                continue;
            }
            let outcome = probe_state(&cfg, seed, &st.model, &data, k, s)?;
            rows.push(format!("{k},{s},{}", fmt_g(outcome.eval_top1)));
        }
    }
    rows.push(String::new());
    write_text(out_csv, &rows.join("\n"))
}

/// Parse "0.85:1.0;0.4:0.6" into context ranges.
pub fn parse_ranges(s: &str) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    for part in s.split(';').filter(|p| !p.trim().is_empty()) {
        let (lo, hi) = part
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("range `{part}` must be lo:hi")))?;
        let lo: f64 = lo.trim().parse().map_err(|_| Error::Config(format!("bad range low `{lo}`")))?;
        let hi: f64 = hi.trim().parse().map_err(|_| Error::Config(format!("bad range high `{hi}`")))?;
        out.push((lo, hi));
    }
    if out.is_empty() {
        return Err(Error::Config("empty range list".into()));
    }
    Ok(out)
}

/// Parse "1,2,4" into a usize list.
pub fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad integer `{p}`")))
        })
        .collect()
}

/// Parse "1,2,3" into seed values.
pub fn parse_seed_list(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad seed `{p}`")))
        })
        .collect()
}
