//! `generate`, `train`, `eval` and `infer` subcommands.
//!
//! A training run directory holds `config.toml` (the resolved configuration),
//! `log.ndjson` (one [`EpochRecord`] per line), `last.ckpt` (weights plus
//! optimizer state, rewritten after every epoch), `best.ckpt` and `best.json`.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::attention::AttentionNorm;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::EvalReport;
use crate::model::EatenModel;
use crate::parallel::Executor;
use crate::synthgen::generate_dataset;
use crate::training::{encode_samples, evaluate_model, EpochRecord, Trainer};

#[derive(Debug, Parser)]
#[command(name = "eaten", version, about = "Entity-aware attention network for document field extraction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset.
    Generate(GenerateArgs),
    /// Train on a generated dataset.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Extract entities from one PGM image.
    Infer(InferArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed (data, initialisation and shuffling).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum NormArg {
    Softmax,
    Ratio,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory written by `generate`.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub ablate_state_transition: bool,
    #[arg(long, value_enum)]
    pub attention_norm: Option<NormArg>,
    /// Continue from the run directory's `last.ckpt`.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Also write the report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
}

/// Exit status for an error: 2 for usage and configuration problems, 3 for
/// failures while running.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Schema(_) | Error::Capacity { .. } | Error::Vocabulary(_) | Error::Checkpoint(_) => 2,
        _ => 3,
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Infer(a) => cmd_infer(&a).map(|_| ()),
    }
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let exec = Executor::with_jobs(args.common.jobs);
    let data = generate_dataset(&cfg.scenario, &cfg.transform, cfg.data.n_train, cfg.data.n_test, cfg.seed, &exec)?;
    let entities: Vec<String> = cfg.schema.entity_names().map(String::from).collect();
    let manifest = io::write_dataset(&args.out, &data, &entities)?;
    println!("{}", manifest.hash);
    Ok(())
}

fn check_manifest(manifest: &io::Manifest, cfg: &RunConfig) -> Result<()> {
    let want: BTreeSet<&str> = cfg.schema.entity_names().collect();
    let have: BTreeSet<&str> = manifest.entities.iter().map(String::as_str).collect();
    if let Some(e) = want.difference(&have).next() {
        return Err(Error::Config(format!("dataset has no entity {e:?} required by the schema")));
    }
    if let Some(e) = have.difference(&want).next() {
        return Err(Error::Config(format!("dataset entity {e:?} is missing from the schema")));
    }
    if (manifest.width, manifest.height) != (cfg.scenario.width, cfg.scenario.height) {
        return Err(Error::Config(format!(
            "dataset images are {}×{}, config expects {}×{}",
            manifest.width, manifest.height, cfg.scenario.width, cfg.scenario.height
        )));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct BestRecord {
    epoch: usize,
    val_mea: f64,
}

/// Number of leading training samples held out for validation.
pub fn validation_count(n_train: usize, fraction: f64) -> usize {
    if n_train < 2 {
        return 0;
    }
    ((n_train as f64 * fraction).round() as usize).min(n_train - 1)
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if args.ablate_state_transition {
        cfg.model.state_transition = false;
    }
    if let Some(n) = args.attention_norm {
        cfg.model.attention_norm = match n {
            NormArg::Softmax => AttentionNorm::Softmax,
            NormArg::Ratio => AttentionNorm::Ratio,
        };
    }
    cfg.validate()?;
    let (manifest, data) = io::read_dataset(&args.data)?;
    check_manifest(&manifest, &cfg)?;

    let exec = Executor::with_jobs(args.common.jobs);
    let mut model = cfg.build_model()?;
    let all = encode_samples(&data.train, &model)?;
    let n_val = validation_count(all.len(), cfg.train.val_fraction);
    let (val, train) = all.split_at(n_val);

    fs::create_dir_all(&args.out)?;
    let last = args.out.join("last.ckpt");
    let best_ckpt = args.out.join("best.ckpt");
    let best_json = args.out.join("best.json");
    let log_path = args.out.join("log.ndjson");

    let (mut trainer, mut best) = if args.resume {
        let state = io::load_weights_into(&last, &mut model)?
            .ok_or_else(|| Error::Checkpoint(format!("{} has no optimizer state", last.display())))?;
        let best: Option<BestRecord> = match fs::read(&best_json) {
            Ok(b) => Some(serde_json::from_slice(&b)?),
            Err(_) => None,
        };
        truncate_log(&log_path, state.epoch)?;
        (Trainer::resume(&model, cfg.train.clone(), &exec, state)?, best)
    } else {
        fs::write(args.out.join("config.toml"), cfg.to_toml_string())?;
        fs::write(&log_path, "")?;
        (Trainer::new(&model, cfg.train.clone(), &exec)?, None)
    };

    let mut log = fs::OpenOptions::new().append(true).open(&log_path)?;
    while !trainer.is_done() {
        let rec = match trainer.run_epoch(&mut model, train, val) {
            Ok(r) => r,
            Err(e) => {
                log::error!("epoch {} failed: {e}; last good checkpoint kept at {}", trainer.state().epoch, last.display());
                return Err(e);
            }
        };
        log::info!(
            "epoch {} loss {:.4} lr {:.5} val_mEA {} ({:.1}s)",
            rec.epoch,
            rec.loss,
            rec.lr,
            rec.val_mea.map_or("-".into(), |v| format!("{v:.4}")),
            rec.seconds
        );
        writeln!(log, "{}", serde_json::to_string(&rec)?)?;
        io::save_checkpoint(&last, &model, Some(trainer.state()))?;
        // Without validation data the latest epoch counts as best.
        let score = rec.val_mea.or(val.is_empty().then_some(0.0));
        if let Some(v) = score {
            if best.as_ref().is_none_or(|b| v >= b.val_mea) {
                io::save_checkpoint(&best_ckpt, &model, None)?;
                let b = BestRecord {
                    epoch: rec.epoch,
                    val_mea: v,
                };
                fs::write(&best_json, serde_json::to_string(&b)? + "\n")?;
                best = Some(b);
            }
        }
    }
    if let Some(b) = &best {
        println!("best epoch {} val mEA {:.4}", b.epoch, b.val_mea);
    }
    Ok(())
}

/// Drops log lines for epochs at or after `next_epoch`, so a resumed run
/// appends exactly where the checkpoint left off.
fn truncate_log(path: &Path, next_epoch: usize) -> Result<()> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let rec: EpochRecord = serde_json::from_str(line)?;
        if rec.epoch < next_epoch {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    Ok(fs::write(path, kept)?)
}

/// The checkpoint's model, or with `--config` the configured model with the
/// checkpoint weights loaded into it (shapes must agree).
fn load_model(common: &Common, checkpoint: &Path) -> Result<EatenModel> {
    if common.config.is_some() {
        let cfg = load_config(common)?;
        let mut model = cfg.build_model()?;
        io::load_weights_into(checkpoint, &mut model)?;
        Ok(model)
    } else {
        Ok(io::load_checkpoint(checkpoint)?.model)
    }
}

pub fn format_report(r: &EvalReport) -> String {
    let mut s = format!(
        "samples {}\nmEA {:.4}  mEP {:.4}  mER {:.4}  mEF {:.4}\nper-sample mEA {:.4}  mEP {:.4}  mER {:.4}  mEF {:.4}\n",
        r.samples, r.mea, r.mep, r.mer, r.mef, r.macro_mea, r.macro_mep, r.macro_mer, r.macro_mef
    );
    let width = r.per_entity.iter().map(|e| e.entity.len()).max().unwrap_or(6).max(6);
    s.push_str(&format!("{:<width$}  accuracy  matched  predicted  gold\n", "entity"));
    for e in &r.per_entity {
        s.push_str(&format!(
            "{:<width$}  {:>8.4}  {:>7}  {:>9}  {:>4}\n",
            e.entity, e.accuracy, e.counts.matched, e.counts.predicted, e.counts.gold
        ));
    }
    s
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let model = load_model(&args.common, &args.checkpoint)?;
    let (_, data) = io::read_dataset(&args.data)?;
    let want: BTreeSet<&str> = model.schema.entity_names().collect();
    let samples = match args.split {
        SplitArg::Train => &data.train,
        SplitArg::Test => &data.test,
    };
    if let Some(s) = samples.first() {
        let have: BTreeSet<&str> = s.targets.keys().map(String::as_str).collect();
        if have != want {
            return Err(Error::Config("dataset entities differ from the checkpoint schema".into()));
        }
    }
    let exec = Executor::with_jobs(args.common.jobs);
    let encoded = encode_samples(samples, &model)?;
    let report = evaluate_model(&model, &encoded, &exec)?;
    print!("{}", format_report(&report));
    if let Some(out) = &args.out {
        fs::write(out, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(report)
}

pub fn cmd_infer(args: &InferArgs) -> Result<std::collections::BTreeMap<String, String>> {
    let model = load_model(&args.common, &args.checkpoint)?;
    let image = io::read_pgm(&args.image)?;
    let cfg = &model.config;
    if (image.width, image.height) != (cfg.image_width, cfg.image_height) {
        return Err(Error::Config(format!(
            "image is {}×{}, the model expects {}×{}",
            image.width, image.height, cfg.image_width, cfg.image_height
        )));
    }
    let out = model.infer(&image)?;
    println!("{}", serde_json::to_string(&out)?);
    Ok(out)
}
