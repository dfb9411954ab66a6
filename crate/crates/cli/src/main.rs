use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mfrt::bench::benchmark_latency;
use mfrt::classes::ClassTable;
use mfrt::dataset::{
    decode_image, encode_pgm16, generate_synthetic_dataset, read_dataset, synthetic_class_table, write_dataset,
    SynthSpec,
};
use mfrt::eval::{evaluate, infer_panoptic, infer_semantic};
use mfrt::metrics::MetricsReport;
use mfrt::postprocess::PostprocessConfig;
use mfrt::profile::count_flops;
use mfrt::train::{train_toy, TrainConfig};
use mfrt::{checkpoint, Model, ModelConfig};
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "mfrt", version, about = "Real-time mask-classification segmentation on the CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Copy)]
struct SeedArg {
    /// Seed for everything random in the command.
    #[arg(long, env = "MFRT_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Synth {
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Image size as HxW (multiples of 32).
        #[arg(long, default_value = "96x96", value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 3)]
        max_instances: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset directory.
    Train {
        #[command(flatten)]
        seed: SeedArg,
        /// TOML file with optional [model] and [train] tables.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides train.steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Writes the per-step loss curve as JSON.
        #[arg(long)]
        loss_curve: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Task::Panoptic)]
        task: Task,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Segment one PNM image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_enum, default_value_t = Task::Semantic)]
        task: Task,
        /// 16-bit PGM of class ids; panoptic runs also write
        /// `<stem>_instance.pgm` next to it.
        #[arg(long)]
        out: PathBuf,
        /// Class table (dataset meta.txt); defaults to the synthetic layout.
        #[arg(long)]
        meta: Option<PathBuf>,
    },
    /// Print parameter and FLOP counts and time inference.
    Bench {
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Benchmarks this checkpoint instead of a fresh model.
        #[arg(long, conflicts_with = "config")]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value = "512x512", value_parser = parse_size)]
        resolution: (usize, usize),
        #[arg(long, default_value_t = 10)]
        iterations: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Task {
    Semantic,
    Panoptic,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let num = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad dimension {v:?} in {s:?}"));
    Ok((num(h)?, num(w)?))
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    #[serde(default)]
    model: toml::Table,
    #[serde(default)]
    train: TrainConfig,
}

fn read_run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            toml::from_str(&text).map_err(|e| anyhow::anyhow!("{}: {}", p.display(), e.message()))
        }
    }
}

/// The `[model]` table over a base configuration: `preset = "tiny"` starts
/// from the small configuration, and `num_classes` falls back to
/// `default_classes`.
fn model_config(table: &toml::Table, default_classes: Option<usize>) -> Result<ModelConfig> {
    let mut table = table.clone();
    let preset = table.remove("preset");
    let classes = default_classes.unwrap_or(ModelConfig::default().num_classes);
    let base = match preset.as_ref().map(|v| v.as_str()) {
        None | Some(Some("default")) => ModelConfig { num_classes: classes, ..Default::default() },
        Some(Some("tiny")) => ModelConfig::tiny(classes),
        Some(other) => bail!("unknown model preset {other:?}; use \"tiny\" or \"default\""),
    };
    let mut merged = toml::Table::try_from(&base)?;
    merged.extend(table);
    Ok(ModelConfig::from_toml(&toml::to_string(&merged)?)?)
}

fn write_json(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { seed, count, size, classes, max_instances, out } => {
            let ds = generate_synthetic_dataset(&SynthSpec {
                seed: seed.seed,
                count,
                height: size.0,
                width: size.1,
                num_classes: classes,
                max_instances,
            })?;
            write_dataset(&out, &ds)?;
            println!("wrote {} records to {}", ds.records.len(), out.display());
        }
        Command::Train { seed, config, data, out, steps, loss_curve } => {
            let rc = read_run_config(config.as_deref())?;
            let ds = read_dataset(&data)?;
            let cfg = model_config(&rc.model, Some(ds.table.num_classes()))?;
            let mut tc = rc.train;
            tc.seed = seed.seed;
            if let Some(s) = steps {
                tc.steps = s;
            }
            let model = Model::new(cfg, seed.seed)?;
            let res = train_toy(model, &ds, &tc)?;
            checkpoint::save(&res.model, &out)?;
            if let Some(p) = loss_curve {
                write_json(&p, &serde_json::to_string(&res.loss_curve)?)?;
            }
            match res.loss_curve.last() {
                Some(l) => println!("trained {} steps, final loss {l:.5}, saved {}", res.steps_run(), out.display()),
                None => println!("saved untrained model to {}", out.display()),
            }
            if let Some(e) = res.evals.last() {
                println!("step {}: PQ {:.4} mIoU {:.4}", e.step, e.pq, e.miou);
            }
        }
        Command::Eval { ckpt, data, task, json } => {
            let ds = read_dataset(&data)?;
            let model = checkpoint::load(&ckpt)?;
            let ev = evaluate(&model, &ds, &PostprocessConfig::default())?;
            let report = match task {
                Task::Semantic => MetricsReport::Semantic { images: ev.images, result: ev.semantic },
                Task::Panoptic => MetricsReport::Panoptic {
                    images: ev.images,
                    miou: ev.semantic.miou,
                    result: ev.panoptic,
                },
            };
            print!("{}", report.to_table(&ds.table));
            if let Some(p) = json {
                write_json(&p, &report.to_json())?;
            }
        }
        Command::Infer { ckpt, image, task, out, meta } => {
            let model = checkpoint::load(&ckpt)?;
            let bytes = fs::read(&image).with_context(|| format!("cannot read {}", image.display()))?;
            let img = decode_image(&bytes)?;
            let (_, h, w) = img.dims3()?;
            let pp = PostprocessConfig::default();
            match task {
                Task::Semantic => {
                    let sem = infer_semantic(&model, &img, &pp)?;
                    fs::write(&out, encode_pgm16(h, w, &sem.labels)?)?;
                }
                Task::Panoptic => {
                    let table = match meta {
                        Some(p) => ClassTable::parse(
                            &fs::read_to_string(&p).with_context(|| format!("cannot read {}", p.display()))?,
                        )?,
                        None => synthetic_class_table(model.config().num_classes),
                    };
                    if table.num_classes() != model.config().num_classes {
                        bail!(
                            "class table has {} classes, checkpoint expects {}",
                            table.num_classes(),
                            model.config().num_classes
                        );
                    }
                    let pan = infer_panoptic(&model, &img, &table, &pp)?;
                    fs::write(&out, encode_pgm16(h, w, &pan.to_semantic(table.ignore_label).labels)?)?;
                    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
                    let inst = out.with_file_name(format!("{stem}_instance.pgm"));
                    fs::write(&inst, encode_pgm16(h, w, &pan.to_instances())?)?;
                    println!("{} segments", pan.segments().len());
                }
            }
            println!("wrote {}x{} prediction to {}", h, w, out.display());
        }
        Command::Bench { seed, config, ckpt, resolution, iterations, warmup, json } => {
            let model = match ckpt {
                Some(p) => checkpoint::load(&p)?,
                None => {
                    let rc = read_run_config(config.as_deref())?;
                    Model::new(model_config(&rc.model, None)?, seed.seed)?
                }
            };
            let (h, w) = resolution;
            let cost = count_flops(model.config(), h, w)?;
            let lat = benchmark_latency(&model, h, w, iterations, warmup, seed.seed)?;
            print!("{}", cost.to_table());
            println!("{}", lat.to_table());
            if let Some(p) = json {
                let doc = serde_json::json!({ "cost": cost, "latency": lat });
                write_json(&p, &serde_json::to_string_pretty(&doc)?)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
