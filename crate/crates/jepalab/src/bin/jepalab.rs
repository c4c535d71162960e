use std::path::PathBuf;

use clap::{Parser, Subcommand};

use jepalab::cli;
use jepalab::config::{apply_override, load_value, Conditioning, RunConfig};
use jepalab::error::{Error, Result};
use jepalab::metrics::EmbedMode;

#[derive(Parser)]
#[command(name = "jepalab", version, about = "Desk-scale joint-embedding predictive architecture lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the model (baseline or conditioned) per the run config.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// on | off (selects the conditioned variant vs the baseline)
        #[arg(long)]
        conditioning: Option<String>,
        /// Comma-separated seeds; multiple seeds run into subdirectories.
        #[arg(long)]
        seed: Option<String>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Continue a checkpointed run instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train and evaluate a frozen-backbone linear probe on a checkpoint.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory-per-class PNG tree; defaults to the checkpoint's dataset.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value = "results.csv")]
        out: PathBuf,
    },
    /// Print rankme (and lidar for grouped dumps) of an embedding file.
    Metrics {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 1e-7)]
        rankme_eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        lidar_delta: f64,
    },
    /// Pretrain both variants over context-scale ranges and seeds.
    SweepContext {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Semicolon-separated lo:hi pairs, e.g. "0.85:1.0;0.4:0.6;0.1:0.2"
        #[arg(long)]
        ranges: String,
        #[arg(long, default_value = "sweep.csv")]
        out: PathBuf,
    },
    /// Probe every checkpoint of a finished run.
    EfficiencyCurve {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "curve.csv")]
        out: PathBuf,
    },
    /// Probe one checkpoint under a grid of inference pooling settings.
    AblatePooling {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "1,2,4")]
        kernels: String,
        #[arg(long, default_value = "1,2,4")]
        strides: String,
        #[arg(long, default_value = "ablate.csv")]
        out: PathBuf,
    },
    /// Dump pooled embeddings (or grouped context views) to a container file.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "embeddings.bin")]
        out: PathBuf,
        /// teacher | student
        #[arg(long, default_value = "teacher")]
        mode: String,
        /// Emit q grouped context views per image instead of one embedding.
        #[arg(long)]
        views: Option<usize>,
    },
    /// Materialize a synthetic dataset as a directory-per-class PNG tree.
    GenSynth {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0.8)]
        corr: f64,
        #[arg(long, default_value_t = 3)]
        grid_objects: usize,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Pull `--a.b value` pairs out of argv before clap sees them; they override
/// config keys by dotted path.
fn extract_dotted(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter().peekable();
    while let Some(a) = it.next() {
        if let Some(path) = a.strip_prefix("--") {
            if path.contains('.') && !path.starts_with('.') {
                if let Some((p, v)) = path.split_once('=') {
                    overrides.push((p.to_string(), v.to_string()));
                    continue;
                }
                if let Some(v) = it.next() {
                    overrides.push((path.to_string(), v));
                    continue;
                }
            }
        }
        rest.push(a);
    }
    (rest, overrides)
}

fn load_config(path: Option<&PathBuf>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut value = match path {
        Some(p) => load_value(p)?,
        None => RunConfig::default().to_value(),
    };
    for (p, v) in overrides {
        apply_override(&mut value, p, v)?;
    }
    RunConfig::from_value(value)
}

fn run(cmd: Command, overrides: Vec<(String, String)>) -> Result<()> {
    match cmd {
        Command::Pretrain { config, conditioning, seed, out_dir, resume } => {
            if let Some(ckpt) = resume {
                let summary = cli::cmd_resume(&ckpt)?;
                println!(
                    "resumed to step {} (final loss {:.6})",
                    summary.steps, summary.final_loss
                );
                return Ok(());
            }
            let mut cfg = load_config(config.as_ref(), &overrides)?;
            if let Some(c) = conditioning {
                cfg.conditioning = c.parse::<Conditioning>()?;
            }
            if let Some(s) = seed {
                cfg.seeds = cli::parse_seed_list(&s)?;
            }
            if let Some(d) = out_dir {
                cfg.out_dir = d;
            }
            let summaries = cli::cmd_pretrain(&cfg)?;
            for s in &summaries {
                println!(
                    "{}: {} steps, final loss {:.6}, {} checkpoints",
                    s.out_dir.display(),
                    s.steps,
                    s.final_loss,
                    s.checkpoints.len()
                );
            }
            Ok(())
        }
        Command::Probe { checkpoint, dataset, epochs, out } => {
            let o = cli::cmd_probe(&checkpoint, dataset.as_deref(), epochs, &out)?;
            println!(
                "train top1 {:.4}, eval top1 {:.4} -> {}",
                o.train_top1,
                o.eval_top1,
                out.display()
            );
            Ok(())
        }
        Command::Metrics { input, rankme_eps, lidar_delta } => {
            let m = cli::cmd_metrics(&input, rankme_eps, lidar_delta)?;
            println!("rankme={}", jepalab::config::fmt_g(m.rankme));
            if let Some(l) = m.lidar {
                println!("lidar={}", jepalab::config::fmt_g(l));
            }
            Ok(())
        }
        Command::SweepContext { config, ranges, out } => {
            let cfg = load_config(config.as_ref(), &overrides)?;
            let ranges = cli::parse_ranges(&ranges)?;
            cli::cmd_sweep_context(&cfg, &ranges, &out)?;
            println!("sweep written to {}", out.display());
            Ok(())
        }
        Command::EfficiencyCurve { run_dir, dataset, out } => {
            cli::cmd_efficiency_curve(&run_dir, dataset.as_deref(), &out)?;
            println!("curve written to {}", out.display());
            Ok(())
        }
        Command::AblatePooling { checkpoint, kernels, strides, out } => {
            let kernels = cli::parse_usize_list(&kernels)?;
            let strides = cli::parse_usize_list(&strides)?;
            cli::cmd_ablate_pooling(&checkpoint, &kernels, &strides, &out)?;
            println!("ablation written to {}", out.display());
            Ok(())
        }
        Command::ExportEmbeddings { checkpoint, dataset, out, mode, views } => {
            let mode = match mode.as_str() {
                "teacher" => EmbedMode::Teacher,
                "student" => EmbedMode::Student,
                other => {
                    return Err(Error::Config(format!(
                        "mode must be teacher|student, got `{other}`"
                    )))
                }
            };
            cli::cmd_export_embeddings(&checkpoint, dataset.as_deref(), &out, mode, views)?;
            println!("embeddings written to {}", out.display());
            Ok(())
        }
        Command::GenSynth { seed, n, corr, grid_objects, image_size, out } => {
            cli::cmd_gen_synth(seed, n, corr, grid_objects, image_size, &out)?;
            println!("dataset written to {}", out.display());
            Ok(())
        }
    }
}

fn main() {
    let (args, overrides) = extract_dotted(std::env::args().collect());
    let cli = Cli::parse_from(args);
    if let Err(e) = run(cli.command, overrides) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
