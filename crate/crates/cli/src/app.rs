//! Argument parsing, configuration resolution and subcommand dispatch.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use vprior_core::data::synth::{generate_toy_dataset, ToyDatasetSpec};
use vprior_core::data::{load_manifest, ChannelStats, LabeledImages};
use vprior_core::trainer::{
    evaluate_top1, finetune_phase2, finetune_plain, linear_probe, pretrain_phase1, resume_phase1, Checkpoint,
    ConfigMap, JsonlSink, LinearProbe, Phase2Outcome, TrainConfig,
};
use vprior_core::Error;

use crate::ablation::{
    accuracy_drop, arm_median, negative_cell, negative_medians, negatives_csv, pipeline_arms, pipeline_csv, Arm,
    ArmResult, NegativeCell,
};
use crate::rundir::{RunDir, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE, RESULTS_FILE};

pub const DATA_ENV: &str = "VPRIOR_DATA";
/// Overrides the executable spawned for `--parallel` ablation cells.
pub const EXE_ENV: &str = "VPRIOR_EXE";

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NON_FINITE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "vprior", version, about = "Contrastive pre-training, self-distillation fine-tuning and ablations")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Small backbone and short schedules for a single CPU.
    Desk,
    /// Full-size backbone and the long schedules.
    Full,
}

impl Preset {
    pub fn config(self) -> TrainConfig {
        match self {
            Preset::Desk => TrainConfig::desk(),
            Preset::Full => TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Dataset root containing `train/` and `val/` class directories.
    #[arg(long, global = true, env = DATA_ENV)]
    pub data: Option<PathBuf>,
    /// Parent directory of run directories.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    /// Key-value configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Configuration override `key=value`; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, global = true, value_enum, default_value = "desk")]
    pub preset: Preset,
    /// Seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Contrastive pre-training on the unlabeled training images.
    Pretrain {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        queue_size: Option<usize>,
        #[arg(long)]
        margin: Option<f64>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Continue a pre-training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Supervised fine-tuning, with self-distillation unless `--plain`.
    Finetune {
        /// Pre-training checkpoint to start from.
        #[arg(long, required_unless_present = "scratch")]
        checkpoint: Option<PathBuf>,
        /// Train from random weights without a teacher.
        #[arg(long, conflicts_with = "checkpoint")]
        scratch: bool,
        /// Cross-entropy only.
        #[arg(long)]
        plain: bool,
        #[arg(long)]
        epochs: Option<usize>,
        /// Distillation weight.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Linear classifier on frozen features.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Top-1 accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Probe head written by `probe`; required for pre-training checkpoints.
        #[arg(long)]
        probe: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Probe accuracy over queue sizes and margins.
    AblateNegatives {
        #[arg(long, value_delimiter = ',', default_value = "64,256,1024")]
        neg: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.6")]
        margins: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Run every cell in its own process.
        #[arg(long)]
        parallel: bool,
    },
    /// Compares supervised, probed, fine-tuned and self-distilled pipelines.
    AblatePipeline {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        parallel: bool,
    },
    /// Writes the synthetic shape dataset.
    MakeToyData {
        dir: PathBuf,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 50)]
        train_per_class: usize,
        #[arg(long, default_value_t = 50)]
        val_per_class: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// One ablation cell, for `--parallel`.
    #[command(hide = true)]
    Cell {
        #[arg(long)]
        result: PathBuf,
        #[arg(long)]
        queue_size: Option<usize>,
        #[arg(long)]
        margin: Option<f64>,
        #[arg(long)]
        pipeline: bool,
        #[arg(long)]
        cell_seed: u64,
    },
}

/// Layers the preset, the configuration file, `--set` overrides and
/// dedicated flags, later layers winning.
pub fn resolve_config(common: &Common, flags: &ConfigMap) -> Result<TrainConfig> {
    let mut cfg = common.preset.config();
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        cfg.apply(&ConfigMap::parse(&text)?)?;
    }
    let mut cli = ConfigMap::new();
    for s in &common.set {
        cli.set_assignment(s)?;
    }
    if let Some(seed) = common.seed {
        for key in ["phase1.seed", "phase2.seed", "probe.seed"] {
            cli.set(key, seed);
        }
    }
    cli.merge(flags);
    cfg.apply(&cli)?;
    cfg.validate()?;
    Ok(cfg)
}

fn flag_map(pairs: &[(&str, Option<String>)]) -> ConfigMap {
    let mut map = ConfigMap::new();
    for (k, v) in pairs {
        if let Some(v) = v {
            map.set(k, v);
        }
    }
    map
}

fn opt<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(T::to_string)
}

/// Training split with its own statistics and validation split normalized
/// with them.
pub fn load_splits(root: &Path, need_val: bool) -> Result<(LabeledImages, Option<LabeledImages>)> {
    let train = load_split(root, "train", None)?;
    let val = if need_val {
        Some(load_split(root, "val", Some(train.stats()))?)
    } else {
        None
    };
    Ok((train, val))
}

fn load_split(root: &Path, split: &str, stats: Option<ChannelStats>) -> Result<LabeledImages> {
    let manifest = load_manifest(root, split)?;
    if manifest.is_empty() {
        return Err(Error::Io {
            path: root.join(split),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no images in split"),
        }
        .into());
    }
    let data = LabeledImages::from_manifest(&manifest)?;
    Ok(match stats {
        Some(s) => data.with_stats(s),
        None => data,
    })
}

fn data_root(common: &Common) -> Result<&Path> {
    match &common.data {
        Some(p) => Ok(p),
        None => Err(Error::Config(format!("no dataset root; pass --data or set {DATA_ENV}")).into()),
    }
}

/// Maps an error to the process exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::NonFinite { .. } => EXIT_NON_FINITE,
                Error::Io { .. } => EXIT_IO,
                Error::Config(_) => EXIT_USAGE,
                _ => EXIT_FAILURE,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_FAILURE
}

fn error_kind(code: i32) -> &'static str {
    match code {
        EXIT_USAGE => "usage",
        EXIT_IO => "io",
        EXIT_NON_FINITE => "non_finite",
        _ => "failure",
    }
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(&cli, &argv) {
        Ok(()) => 0,
        Err(err) => {
            let code = exit_code(&err);
            eprintln!("error[{}]: {err:#}", error_kind(code));
            code
        }
    }
}

fn dispatch(cli: &Cli, argv: &[String]) -> Result<()> {
    let common = &cli.common;
    match &cli.command {
        Cmd::Pretrain {
            epochs,
            queue_size,
            margin,
            temperature,
            batch_size,
            resume,
        } => {
            let flags = flag_map(&[
                ("phase1.epochs", opt(epochs)),
                ("phase1.queue_size", opt(queue_size)),
                ("phase1.margin", opt(margin)),
                ("phase1.temperature", opt(temperature)),
                ("phase1.batch_size", opt(batch_size)),
            ]);
            let cfg = resolve_config(common, &flags)?;
            let (train, _) = load_splits(data_root(common)?, false)?;
            let run = start_run(common, "pretrain", &cfg, argv)?;
            let mut sink = JsonlSink::create(&run.file(METRICS_FILE))?;
            let ckpt = match resume {
                Some(path) => resume_phase1(&cfg, &Checkpoint::load(path)?, &train.unlabeled(), &mut sink)?,
                None => pretrain_phase1(&cfg, &train.unlabeled(), &mut sink)?,
            };
            ckpt.save(&run.file(CHECKPOINT_FILE))?;
            finish(&run)
        }
        Cmd::Finetune {
            checkpoint,
            scratch,
            plain,
            epochs,
            lambda,
            batch_size,
        } => {
            let flags = flag_map(&[
                ("phase2.epochs", opt(epochs)),
                ("phase2.distill_weight", opt(lambda)),
                ("phase2.batch_size", opt(batch_size)),
            ]);
            let cfg = resolve_config(common, &flags)?;
            let (train, val) = load_splits(data_root(common)?, true)?;
            let init = checkpoint.as_deref().map(Checkpoint::load).transpose()?;
            let run = start_run(common, "finetune", &cfg, argv)?;
            let mut sink = JsonlSink::create(&run.file(METRICS_FILE))?;
            let outcome: Phase2Outcome = match (&init, *plain || *scratch) {
                (Some(ckpt), false) => finetune_phase2(&cfg, ckpt, &train, val.as_ref(), &mut sink)?,
                (init, _) => finetune_plain(&cfg, init.as_ref(), &train, val.as_ref(), &mut sink)?,
            };
            outcome.checkpoint.save(&run.file(CHECKPOINT_FILE))?;
            let mut csv = format!("split,top1\ntrain,{:.6}\n", outcome.train_top1);
            if let Some(v) = outcome.val_top1 {
                csv.push_str(&format!("val,{v:.6}\n"));
            }
            run.write(RESULTS_FILE, &csv)?;
            print!("{csv}");
            finish(&run)
        }
        Cmd::Probe { checkpoint, epochs } => {
            let cfg = resolve_config(common, &flag_map(&[("probe.epochs", opt(epochs))]))?;
            let (train, val) = load_splits(data_root(common)?, true)?;
            let ckpt = Checkpoint::load(checkpoint)?;
            let run = start_run(common, "probe", &cfg, argv)?;
            let report = linear_probe(&cfg, &ckpt, &train, val.as_ref())?;
            run.write("probe.json", &serde_json::to_string(&report.probe)?)?;
            let csv = format!(
                "split,top1\ntrain,{:.6}\nval,{:.6}\n",
                report.train_top1,
                report.val_top1.unwrap_or(f64::NAN)
            );
            run.write(RESULTS_FILE, &csv)?;
            print!("{csv}");
            finish(&run)
        }
        Cmd::Eval {
            checkpoint,
            probe,
            split,
        } => {
            let cfg = resolve_config(common, &ConfigMap::new())?;
            let root = data_root(common)?;
            let train_stats = load_manifest(root, "train")?.stats;
            let data = load_split(root, split, Some(train_stats))?;
            let ckpt = Checkpoint::load(checkpoint)?;
            let probe: Option<LinearProbe> = match probe {
                Some(p) => {
                    let text = fs::read_to_string(p).map_err(|e| Error::Io {
                        path: p.clone(),
                        source: e,
                    })?;
                    Some(serde_json::from_str(&text).context("parsing probe head")?)
                }
                None => None,
            };
            let acc = evaluate_top1(&ckpt, &data, probe.as_ref())?;
            let run = start_run(common, "eval", &cfg, argv)?;
            let csv = format!("split,top1\n{split},{acc:.6}\n");
            run.write(RESULTS_FILE, &csv)?;
            print!("{csv}");
            finish(&run)
        }
        Cmd::AblateNegatives {
            neg,
            margins,
            seeds,
            parallel,
        } => {
            let cfg = resolve_config(common, &ConfigMap::new())?;
            let root = data_root(common)?;
            let run = start_run(common, "ablate-negatives", &cfg, argv)?;
            let mut jobs = Vec::new();
            for &m in margins {
                for &k in neg {
                    for &s in seeds {
                        jobs.push((k, m, s));
                    }
                }
            }
            let cells: Vec<NegativeCell> = if *parallel {
                let args = jobs
                    .iter()
                    .map(|&(k, m, s)| {
                        vec![
                            "--queue-size".to_string(),
                            k.to_string(),
                            "--margin".into(),
                            m.to_string(),
                            "--cell-seed".into(),
                            s.to_string(),
                        ]
                    })
                    .collect();
                run_cells(&run, root, args)?
            } else {
                let (train, val) = load_splits(root, true)?;
                let val = val.expect("loaded");
                jobs.iter()
                    .map(|&(k, m, s)| {
                        info!("negatives cell: K={k} m={m} seed={s}");
                        negative_cell(&cfg, k, m, s, &train, &val, &mut vprior_core::trainer::NullSink)
                    })
                    .collect::<vprior_core::Result<_>>()?
            };
            run.write(RESULTS_FILE, &negatives_csv(&cells))?;
            println!("margin,queue_size,median_probe_top1");
            for (m, k, a) in negative_medians(&cells) {
                println!("{m},{k},{a:.4}");
            }
            for &m in margins {
                if let Some(d) = accuracy_drop(&cells, m) {
                    println!("# m={m}: median drop from largest to smallest K = {d:.4}");
                }
            }
            finish(&run)
        }
        Cmd::AblatePipeline { seeds, parallel } => {
            let cfg = resolve_config(common, &ConfigMap::new())?;
            let root = data_root(common)?;
            let run = start_run(common, "ablate-pipeline", &cfg, argv)?;
            let results: Vec<ArmResult> = if *parallel {
                let args = seeds
                    .iter()
                    .map(|s| vec!["--pipeline".to_string(), "--cell-seed".into(), s.to_string()])
                    .collect();
                run_cells(&run, root, args)?
            } else {
                let (train, val) = load_splits(root, true)?;
                let val = val.expect("loaded");
                let mut out = Vec::new();
                for &s in seeds {
                    info!("pipeline arms: seed={s}");
                    out.extend(pipeline_arms(&cfg, s, &Arm::ALL, &train, &val)?);
                }
                out
            };
            run.write(RESULTS_FILE, &pipeline_csv(&results))?;
            println!("arm,median_top1");
            for arm in Arm::ALL {
                if let Some(a) = arm_median(&results, arm) {
                    println!("{},{a:.4}", arm.name());
                }
            }
            finish(&run)
        }
        Cmd::MakeToyData {
            dir,
            classes,
            train_per_class,
            val_per_class,
            size,
        } => {
            let spec = ToyDatasetSpec {
                classes: *classes,
                train_per_class: *train_per_class,
                val_per_class: *val_per_class,
                image_size: *size,
                seed: common.seed.unwrap_or(0),
            };
            generate_toy_dataset(dir, &spec)?;
            println!("{}", dir.display());
            Ok(())
        }
        Cmd::Cell {
            result,
            queue_size,
            margin,
            pipeline,
            cell_seed,
        } => {
            let cfg = resolve_config(common, &ConfigMap::new())?;
            let (train, val) = load_splits(data_root(common)?, true)?;
            let val = val.expect("loaded");
            let json = if *pipeline {
                serde_json::to_string(&pipeline_arms(&cfg, *cell_seed, &Arm::ALL, &train, &val)?)?
            } else {
                let (Some(k), Some(m)) = (queue_size, margin) else {
                    bail!(Error::Config("a negatives cell needs --queue-size and --margin".into()));
                };
                let cell = negative_cell(&cfg, *k, *m, *cell_seed, &train, &val, &mut vprior_core::trainer::NullSink)?;
                serde_json::to_string(&vec![cell])?
            };
            fs::write(result, json).map_err(|e| Error::Io {
                path: result.clone(),
                source: e,
            })?;
            Ok(())
        }
    }
}

fn start_run(common: &Common, command: &str, cfg: &TrainConfig, argv: &[String]) -> Result<RunDir> {
    let run = RunDir::create(&common.out, command)?;
    run.describe(&cfg.to_map(), argv)?;
    info!("run directory {}", run.path().display());
    Ok(run)
}

fn finish(run: &RunDir) -> Result<()> {
    println!("run: {}", run.path().display());
    Ok(())
}

/// Runs one child process per cell, all at once, each reading the run's
/// resolved configuration, and gathers their JSON results in order.
fn run_cells<T: serde::de::DeserializeOwned>(run: &RunDir, root: &Path, cells: Vec<Vec<String>>) -> Result<Vec<T>> {
    let exe = match std::env::var_os(EXE_ENV) {
        Some(p) => PathBuf::from(p),
        None => std::env::current_exe().context("locating the executable")?,
    };
    let dir = run.file("cells");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut children = Vec::new();
    for (i, args) in cells.into_iter().enumerate() {
        let result = dir.join(format!("cell{i:03}.json"));
        let child = Command::new(&exe)
            .arg("--config")
            .arg(run.file(CONFIG_FILE))
            .arg("--data")
            .arg(root)
            .arg("cell")
            .arg("--result")
            .arg(&result)
            .args(&args)
            .spawn()
            .with_context(|| format!("spawning {}", exe.display()))?;
        children.push((child, result, args));
    }
    let mut out = Vec::new();
    for (mut child, result, args) in children {
        let status = child.wait().context("waiting for a cell process")?;
        if !status.success() {
            bail!("cell {} failed with {status}", args.join(" "));
        }
        let text = fs::read_to_string(&result).with_context(|| format!("reading {}", result.display()))?;
        out.extend(serde_json::from_str::<Vec<T>>(&text)?);
    }
    Ok(out)
}
