mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use haa::data::{generate_dataset, Dataset};
use haa::eval::{evaluate, weight_stats};
use haa::model::{load_checkpoint, Variant};
use haa::train::train_staged;
use haa::verify;

use settings::{Settings, UsageError};

#[derive(Parser)]
#[command(name = "haa", version, about = "Head-shoulder adaptive attention person re-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct Common {
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Flat key=value settings file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Run the staged training protocol for one variant.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_parser = ["haa", "concat", "global-only", "hsa-only"])]
        variant: Option<String>,
        /// Multiplier on every stage length.
        #[arg(long)]
        epochs_scale: Option<f64>,
    },
    /// Single-query retrieval evaluation of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_parser = ["all", "black", "nonblack"])]
        subset: Option<String>,
    },
    /// Finite-difference check of every differentiable component.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Random points per component.
        #[arg(long)]
        points: Option<usize>,
        /// Scale the backward pass of the named component.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn resolve(common: &Common, flags: &[(&str, Option<String>)]) -> Result<Settings> {
    let mut s = Settings::default();
    if let Some(path) = &common.config {
        s.apply_file(path)?;
    }
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    let common_flags = [("seed", common.seed.map(|v| v.to_string())), ("out", path(&common.out))];
    for (k, v) in common_flags.iter().chain(flags) {
        if let Some(v) = v {
            s.apply(k, v)?;
        }
    }
    Ok(s)
}

fn require<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| UsageError(format!("missing --{flag}")).into())
}

fn write_run_record(out: &Path, command: &str, s: &Settings) -> Result<()> {
    let text = format!("command={command}\nversion={}\n{}", env!("CARGO_PKG_VERSION"), s.to_text());
    let path = out.join("run.txt");
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::GenData { common } => {
            let s = resolve(&common, &[])?;
            let out = require(&s.out, "out")?;
            s.dataset.validate().map_err(|e| UsageError(e.to_string()))?;
            let ds = generate_dataset(&s.dataset, s.seed, out)?;
            write_run_record(out, "gen-data", &s)?;
            println!("wrote {} images to {}", ds.len(), out.display());
        }
        Command::Train {
            common,
            data,
            variant,
            epochs_scale,
        } => {
            let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
            let s = resolve(
                &common,
                &[
                    ("data", path(&data)),
                    ("variant", variant),
                    ("epochs_scale", epochs_scale.map(|v| v.to_string())),
                ],
            )?;
            let out = require(&s.out, "out")?;
            let data = require(&s.data, "data")?;
            let cfg = s.train_config()?;
            let ds = Dataset::load(data)?;
            let outcome = train_staged::<f32>(&cfg, &ds, s.seed, s.variant)?;
            outcome.write(out)?;
            write_run_record(out, "train", &s)?;
            if let Some(iou) = outcome.stage0_iou {
                println!("stage-0 held-out IoU {iou:.4}");
            }
            if let Some(last) = outcome.metrics.last() {
                println!("final epoch loss {:.4}", last.total);
            }
            println!("checkpoints written to {}", out.display());
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            subset,
        } => {
            let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
            let mut s = resolve(
                &common,
                &[("data", path(&data)), ("checkpoint", path(&checkpoint)), ("subset", subset)],
            )?;
            let out = require(&s.out, "out")?.to_path_buf();
            let ckpt = load_checkpoint(require(&s.checkpoint, "checkpoint")?)?;
            let ds = Dataset::load(require(&s.data, "data")?)?;
            let model = ckpt.model()?;
            s.seed = ckpt.seed;
            s.variant = ckpt.variant;
            s.train.model = ckpt.config.clone();
            let report = evaluate(&model, &ckpt.params, &ds, s.subset, s.max_rank)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write_file(&out.join("report.json"), &report.to_json())?;
            write_file(&out.join("report.csv"), &report.to_csv())?;
            write_run_record(&out, "eval", &s)?;
            println!(
                "{} / {}: mAP {:.4}, rank-1 {:.4}, {} queries ({} excluded)",
                model.variant,
                s.subset,
                report.map,
                report.rank(1),
                report.num_queries,
                report.num_excluded
            );
            if model.variant == Variant::Haa {
                let w = weight_stats(&model, &ckpt.params, &ds)?;
                write_file(
                    &out.join("fusion_weights.txt"),
                    &format!("black_w2={}\nnonblack_w2={}\n", w.black_w2, w.nonblack_w2),
                )?;
                println!("mean w2: black {:.4}, non-black {:.4}", w.black_w2, w.nonblack_w2);
            }
        }
        Command::Gradcheck {
            common,
            points,
            inject_fault,
        } => {
            let s = resolve(&common, &[("points", points.map(|p| p.to_string()))])?;
            if let Some(f) = inject_fault.as_deref() {
                if !verify::component_names().contains(&f) {
                    return Err(UsageError(format!("unknown component `{f}`")).into());
                }
            }
            let reports = verify::run_suite(s.seed, s.points, inject_fault.as_deref())?;
            let table = verify::format_table(&reports);
            print!("{table}");
            if let Some(out) = &s.out {
                std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
                write_file(&out.join("gradcheck.txt"), &table)?;
                write_run_record(out, "gradcheck", &s)?;
            }
            let failed: Vec<_> = reports.iter().filter(|r| !r.passed()).map(|r| r.component).collect();
            if !failed.is_empty() {
                eprintln!("gradient check failed: {}", failed.join(", "));
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
