use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};

use cmaev::data::{generate, load_dataset, save_dataset, Dataset, GenerateConfig, ShiftConfig};
use cmaev::model::{Checkpoint, CmaeModel, ModelConfig};
use cmaev::selfcheck;
use cmaev::trainer::{
    evaluate_multiview, run_finetune, run_pretrain, MetricsRecord, Pretrainer, TrainConfig,
};
use cmaev::Scalar;

use crate::config;
use crate::{parse_views, Command, Common, EvalArgs, FinetuneArgs, GenDataArgs, PretrainArgs};

pub const MANIFEST: &str = "manifest.cfg";
pub const INCOMPLETE: &str = "INCOMPLETE";
pub const EVAL_REPORT: &str = "eval.json";

pub enum Failure {
    Usage(anyhow::Error),
    Run(anyhow::Error),
}

type Outcome<T> = Result<T, Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn failed(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Run(e.into())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GenDataRun {
    out: String,
    file: String,
    #[serde(flatten)]
    generate: GenerateConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PretrainRun {
    out: String,
    data: String,
    resume: String,
    precision: String,
    #[serde(flatten)]
    train: TrainConfig,
    model: ModelConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FinetuneRun {
    out: String,
    data: String,
    checkpoint: String,
    precision: String,
    #[serde(flatten)]
    train: TrainConfig,
    model: ModelConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EvalRun {
    out: String,
    data: String,
    checkpoint: String,
    precision: String,
    views: String,
    shift: ShiftConfig,
}

fn push<T: ToString>(kv: &mut Vec<(String, String)>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        kv.push((key.to_string(), v.to_string()));
    }
}

fn path_str(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.to_string_lossy().into_owned())
}

/// Config file, then `--set`, then the shared named flags.
fn overrides(common: &Common) -> Outcome<Vec<(String, String)>> {
    let mut kv = Vec::new();
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(usage)?;
        kv.extend(config::parse(&text).map_err(usage)?);
    }
    for s in &common.set {
        kv.push(config::parse_assignment(s).map_err(usage)?);
    }
    push(&mut kv, "out", path_str(&common.out));
    push(&mut kv, "seed", common.seed);
    Ok(kv)
}

fn resolve<C: Serialize + for<'de> Deserialize<'de>>(base: &C, kv: &[(String, String)]) -> Outcome<C> {
    config::resolve(base, kv).map_err(usage)
}

fn output_dir(out: &str, subcommand: &str) -> Outcome<PathBuf> {
    if !out.is_empty() {
        return Ok(PathBuf::from(out));
    }
    match std::env::var_os("CMAEV_OUT") {
        Some(root) if !root.is_empty() => Ok(PathBuf::from(root).join(subcommand)),
        _ => Err(usage(anyhow!("no output directory: pass --out or set CMAEV_OUT"))),
    }
}

/// Creates `out` and marks it incomplete until [`finish`].
fn start(out: &Path, allow_existing: bool) -> Outcome<()> {
    if out.exists() && !allow_existing {
        let busy = fs::read_dir(out).map_err(failed)?.next().is_some();
        if busy {
            return Err(usage(anyhow!("output directory {} is not empty", out.display())));
        }
    }
    fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(failed)?;
    fs::write(out.join(INCOMPLETE), "run did not finish\n").map_err(failed)?;
    Ok(())
}

fn finish(out: &Path) -> Outcome<()> {
    fs::remove_file(out.join(INCOMPLETE)).map_err(failed)
}

fn write_manifest<C: Serialize>(out: &Path, subcommand: &str, cfg: &C) -> Outcome<()> {
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let mut text = format!(
        "# cmaev {subcommand}\n# version = {}\n# started = {started}\n# out = {}\n",
        env!("CARGO_PKG_VERSION"),
        out.display()
    );
    text.push_str(&config::render(cfg).map_err(failed)?);
    fs::write(out.join(MANIFEST), text).map_err(failed)
}

fn require(value: &str, key: &str) -> Outcome<PathBuf> {
    if value.is_empty() {
        return Err(usage(anyhow!("missing required setting {key}")));
    }
    Ok(PathBuf::from(value))
}

fn load_data(path: &Path) -> Outcome<Dataset> {
    load_dataset(path)
        .with_context(|| format!("loading dataset {}", path.display()))
        .map_err(failed)
}

fn load_checkpoint(path: &Path) -> Outcome<Checkpoint> {
    Checkpoint::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .map_err(failed)
}

enum Precision {
    F32,
    F64,
}

fn precision(s: &str) -> Outcome<Precision> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(usage(anyhow!("precision must be f32 or f64, got {other:?}"))),
    }
}

pub fn dispatch(cmd: Command) -> Outcome<i32> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Finetune(a) => finetune(a),
        Command::Eval(a) => eval(a),
        Command::Selfcheck => Ok(self_check()),
    }
}

fn gen_data(a: GenDataArgs) -> Outcome<i32> {
    let mut kv = overrides(&a.common)?;
    push(&mut kv, "num_videos", a.num_videos);
    push(&mut kv, "num_classes", a.num_classes);
    push(&mut kv, "t_total", a.t_total);
    push(&mut kv, "noise_level", a.noise_level);
    push(&mut kv, "file", a.file);
    let base = GenDataRun {
        out: String::new(),
        file: "dataset.cmvd".into(),
        generate: GenerateConfig::default(),
    };
    let mut run = resolve(&base, &kv)?;
    run.generate.validate().map_err(usage)?;
    let name = Path::new(&run.file);
    if run.file.is_empty() || name.components().count() != 1 || name.file_name().is_none() {
        return Err(usage(anyhow!("file must be a plain file name, got {:?}", run.file)));
    }
    let out = output_dir(&run.out, "gen-data")?;
    run.out = out.to_string_lossy().into_owned();
    start(&out, false)?;
    write_manifest(&out, "gen-data", &run)?;
    let ds = generate(&run.generate).map_err(failed)?;
    let path = out.join(&run.file);
    save_dataset(&ds, &path).map_err(failed)?;
    finish(&out)?;
    println!("wrote {} videos to {}", ds.len(), path.display());
    Ok(0)
}

fn pretrain(a: PretrainArgs) -> Outcome<i32> {
    let mut kv = overrides(&a.common)?;
    push(&mut kv, "data", path_str(&a.data));
    push(&mut kv, "resume", path_str(&a.resume));
    push(&mut kv, "total_epochs", a.epochs);
    push(&mut kv, "batch_size", a.batch_size);
    push(&mut kv, "base_lr", a.base_lr);
    push(&mut kv, "lambda_c", a.lambda_c);
    push(&mut kv, "lambda_r", a.lambda_r);
    push(&mut kv, "tau", a.tau);
    push(&mut kv, "mask_ratio", a.mask_ratio);
    push(&mut kv, "checkpoint_every", a.checkpoint_every);
    push(&mut kv, "precision", a.precision);
    let mut base = PretrainRun {
        out: String::new(),
        data: String::new(),
        resume: String::new(),
        precision: "f32".into(),
        train: TrainConfig::pretrain(),
        model: ModelConfig::default(),
    };
    let first = resolve(&base, &kv)?;
    let resume = if first.resume.is_empty() {
        None
    } else {
        let ckpt = load_checkpoint(Path::new(&first.resume))?;
        base.model = ckpt.model_config().map_err(failed)?;
        Some(ckpt)
    };
    if resume.is_none() {
        push(&mut kv, "model.init_seed", a.common.seed);
    }
    let mut run = resolve(&base, &kv)?;
    if resume.is_some() && run.model != base.model {
        return Err(usage(anyhow!("model settings conflict with the resumed checkpoint")));
    }
    run.train.validate().map_err(usage)?;
    run.model.validate().map_err(usage)?;
    let prec = precision(&run.precision)?;
    let data_path = require(&run.data, "data")?;
    let out = output_dir(&run.out, "pretrain")?;
    run.out = out.to_string_lossy().into_owned();
    let data = load_data(&data_path)?;
    start(&out, resume.is_some())?;
    write_manifest(&out, "pretrain", &run)?;
    match prec {
        Precision::F32 => pretrain_as::<f32>(&run, resume.as_ref(), &data, &out)?,
        Precision::F64 => pretrain_as::<f64>(&run, resume.as_ref(), &data, &out)?,
    }
    finish(&out)?;
    Ok(0)
}

fn pretrain_as<T: Scalar>(run: &PretrainRun, resume: Option<&Checkpoint>, data: &Dataset, out: &Path) -> Outcome<()> {
    let mut pre = match resume {
        Some(ckpt) => Pretrainer::<T>::resume(run.train.clone(), ckpt, data).map_err(usage)?,
        None => Pretrainer::<T>::new(run.train.clone(), run.model.clone(), data).map_err(usage)?,
    };
    if resume.is_some() {
        truncate_metrics(&out.join(cmaev::trainer::pretrain::METRICS_FILE), pre.opt.step)?;
    }
    let outcome = run_pretrain(&mut pre, out).map_err(failed)?;
    println!(
        "pretrained {} epochs: loss {:.4} (first epoch) -> {:.4} (last epoch); checkpoint {}",
        pre.epoch,
        outcome.first_epoch_loss,
        outcome.last_epoch_loss,
        outcome.final_checkpoint.display()
    );
    Ok(())
}

/// Drops records past `step` so a resumed run continues the stream exactly.
fn truncate_metrics(path: &Path, step: u64) -> Outcome<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path).map_err(failed)?;
    let mut keep = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let rec: MetricsRecord = serde_json::from_str(line).map_err(failed)?;
        if rec.step <= step {
            keep.push_str(line);
            keep.push('\n');
        }
    }
    fs::write(path, keep).map_err(failed)
}

fn finetune(a: FinetuneArgs) -> Outcome<i32> {
    let mut kv = overrides(&a.common)?;
    push(&mut kv, "data", path_str(&a.data));
    push(&mut kv, "checkpoint", path_str(&a.checkpoint));
    push(&mut kv, "total_epochs", a.epochs);
    push(&mut kv, "batch_size", a.batch_size);
    push(&mut kv, "base_lr", a.base_lr);
    push(&mut kv, "repeated_samples", a.repeated_samples);
    push(&mut kv, "linear_probe", a.linear_probe.then_some(true));
    push(&mut kv, "precision", a.precision);
    let mut base = FinetuneRun {
        out: String::new(),
        data: String::new(),
        checkpoint: String::new(),
        precision: "f32".into(),
        train: TrainConfig::finetune(),
        model: ModelConfig::default(),
    };
    let first = resolve(&base, &kv)?;
    let ckpt = if first.checkpoint.is_empty() {
        None
    } else {
        let ckpt = load_checkpoint(Path::new(&first.checkpoint))?;
        base.model = ckpt.model_config().map_err(failed)?;
        Some(ckpt)
    };
    if ckpt.is_none() {
        push(&mut kv, "model.init_seed", a.common.seed);
    }
    let mut run = resolve(&base, &kv)?;
    if ckpt.is_some() && run.model != base.model {
        return Err(usage(anyhow!("model settings conflict with the checkpoint")));
    }
    run.train.validate().map_err(usage)?;
    run.model.validate().map_err(usage)?;
    let prec = precision(&run.precision)?;
    let data_path = require(&run.data, "data")?;
    let out = output_dir(&run.out, "finetune")?;
    run.out = out.to_string_lossy().into_owned();
    let data = load_data(&data_path)?;
    if data.header.num_classes != run.model.num_classes {
        return Err(usage(anyhow!(
            "model has {} classes, dataset has {}",
            run.model.num_classes,
            data.header.num_classes
        )));
    }
    start(&out, false)?;
    write_manifest(&out, "finetune", &run)?;
    match prec {
        Precision::F32 => finetune_as::<f32>(&run, ckpt.as_ref(), &data, &out)?,
        Precision::F64 => finetune_as::<f64>(&run, ckpt.as_ref(), &data, &out)?,
    }
    finish(&out)?;
    Ok(0)
}

fn finetune_as<T: Scalar>(run: &FinetuneRun, ckpt: Option<&Checkpoint>, data: &Dataset, out: &Path) -> Outcome<()> {
    let model = match ckpt {
        Some(c) => c.to_model::<T>().map_err(failed)?,
        None => CmaeModel::<T>::new(run.model.clone()).map_err(usage)?,
    };
    let (_, outcome) = run_finetune(&run.train, model, data, out).map_err(failed)?;
    println!(
        "finetuned {} epochs: final-epoch train accuracy {:.4}",
        run.train.total_epochs, outcome.final_train_accuracy
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Outcome<i32> {
    let mut kv = overrides(&a.common)?;
    if a.common.seed.is_some() {
        return Err(usage(anyhow!("eval is deterministic and takes no seed")));
    }
    push(&mut kv, "data", path_str(&a.data));
    push(&mut kv, "checkpoint", path_str(&a.checkpoint));
    push(&mut kv, "views", a.views);
    push(&mut kv, "precision", a.precision);
    let base = EvalRun {
        out: String::new(),
        data: String::new(),
        checkpoint: String::new(),
        precision: "f32".into(),
        views: "1x1".into(),
        shift: ShiftConfig::default(),
    };
    let mut run = resolve(&base, &kv)?;
    let (nt, ns) = parse_views(&run.views).map_err(|e| usage(anyhow!(e)))?;
    run.shift.validate().map_err(usage)?;
    let prec = precision(&run.precision)?;
    let data_path = require(&run.data, "data")?;
    let ckpt_path = require(&run.checkpoint, "checkpoint")?;
    let out = output_dir(&run.out, "eval")?;
    run.out = out.to_string_lossy().into_owned();
    let data = load_data(&data_path)?;
    let ckpt = load_checkpoint(&ckpt_path)?;
    start(&out, false)?;
    write_manifest(&out, "eval", &run)?;
    let cfg = TrainConfig {
        shift: run.shift,
        ..TrainConfig::finetune()
    };
    let report = match prec {
        Precision::F32 => evaluate_multiview(&ckpt.to_model::<f32>().map_err(failed)?, &data, nt, ns, &cfg),
        Precision::F64 => evaluate_multiview(&ckpt.to_model::<f64>().map_err(failed)?, &data, nt, ns, &cfg),
    }
    .map_err(failed)?;
    let json = serde_json::to_string_pretty(&report).map_err(failed)?;
    fs::write(out.join(EVAL_REPORT), json + "\n").map_err(failed)?;
    finish(&out)?;
    println!(
        "top-1 accuracy {:.4} ({}/{}) with {nt}x{ns} views",
        report.accuracy, report.correct, report.total
    );
    Ok(0)
}

fn self_check() -> i32 {
    let results = selfcheck::run_all();
    let mut failures = 0;
    for r in &results {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        if !r.passed {
            failures += 1;
        }
        println!("{tag} {} ({})", r.name, r.detail);
    }
    println!("{} checks, {} failed", results.len(), failures);
    if failures == 0 {
        0
    } else {
        crate::EXIT_FAILURE
    }
}
