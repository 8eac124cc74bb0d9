use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::Serialize;
use strtr::autodiff::Fault;
use strtr::checkpoint::{load_checkpoint, save_checkpoint};
use strtr::data::{synth_dataset, Dataset, Split};
use strtr::gradcheck::{model_gradcheck, DEFAULT_SEED};
use strtr::metrics::Metrics;
use strtr::network::{build_model, sample_frames, Model, ModelConfig};
use strtr::train::{evaluate, evaluate_samples, history_csv, train as run_training, TrainConfig};

use crate::run_config::{Arch, RunConfig};
use crate::{Common, Failure};

type Outcome = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Loads `--config` (if any) and applies the common flags on top.
fn base(common: &Common) -> Result<RunConfig, Failure> {
    let mut run = match &common.config {
        Some(path) => RunConfig::load(path).map_err(|e| usage(format!("{e:#}")))?,
        None => RunConfig::default(),
    };
    if common.seed.is_some() {
        run.seed = common.seed;
    }
    if common.out.is_some() {
        run.out = common.out.clone();
    }
    run.out.get_or_insert_with(|| PathBuf::from("out"));
    Ok(run)
}

fn out_dir(run: &RunConfig) -> PathBuf {
    run.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn require(value: Option<PathBuf>, flag: &str) -> Result<PathBuf, Failure> {
    value.ok_or_else(|| usage(format!("{flag} is required")))
}

fn load_dataset(dir: &Path) -> Result<Dataset, Failure> {
    Dataset::load(dir).map_err(|e| Failure::Runtime(anyhow!(e).context(format!("loading dataset {}", dir.display()))))
}

fn load_model(dir: &Path) -> Result<Model, Failure> {
    load_checkpoint(dir).map_err(|e| Failure::Runtime(anyhow!(e).context(format!("loading checkpoint {}", dir.display()))))
}

fn check_compatible(model: &Model, data: &Dataset) -> Outcome {
    let cfg = &model.config;
    if (data.joints, data.channels, data.num_classes()) != (cfg.joints, cfg.in_channels, cfg.classes) {
        return Err(Failure::Runtime(anyhow!(
            "dataset has V={}, C={}, {} classes; checkpoint expects V={}, C={}, {} classes",
            data.joints,
            data.channels,
            data.num_classes(),
            cfg.joints,
            cfg.in_channels,
            cfg.classes
        )));
    }
    Ok(())
}

pub fn gen_data(common: Common, classes: Option<usize>, per_class: Option<usize>, joints: Option<usize>, frames: Option<usize>) -> Outcome {
    let mut run = base(&common)?;
    let g = &mut run.gen_data;
    g.classes = classes.unwrap_or(g.classes);
    g.per_class = per_class.unwrap_or(g.per_class);
    g.joints = joints.unwrap_or(g.joints);
    g.frames = frames.unwrap_or(g.frames);
    if g.classes == 0 || g.per_class == 0 || g.joints == 0 || g.frames == 0 {
        return Err(usage("--classes, --per-class, --joints and --frames must be positive"));
    }
    let seed = *run.seed.get_or_insert(0);
    let out = out_dir(&run);
    let g = &run.gen_data;
    let data = synth_dataset(g.classes, g.per_class, g.joints, g.frames, seed)?;
    data.save(&out).map_err(|e| anyhow!(e).context(format!("writing dataset to {}", out.display())))?;
    run.echo("gen-data", &out)?;
    println!(
        "wrote {} samples ({} train, {} val, {} test) to {}",
        data.samples.len(),
        data.count(Split::Train),
        data.count(Split::Val),
        data.count(Split::Test),
        out.display()
    );
    Ok(())
}

fn fit_to_data(mut cfg: ModelConfig, data: &Dataset) -> ModelConfig {
    cfg.joints = data.joints;
    cfg.in_channels = data.channels;
    cfg.classes = data.num_classes();
    cfg.skeleton = data.skeleton.clone();
    cfg
}

pub fn train(common: Common, data: Option<PathBuf>, preset: Option<String>, epochs: Option<usize>, arch: Option<Arch>) -> Outcome {
    let mut run = base(&common)?;
    if data.is_some() {
        run.data = data;
    }
    if preset.is_some() {
        run.preset = preset;
        run.train = None;
    }
    if arch.is_some() {
        run.arch = arch;
        run.model = None;
    }
    let dataset = load_dataset(&require(run.data.clone(), "--data")?)?;

    let mut tcfg = match run.train.clone() {
        Some(t) => t,
        None => TrainConfig::preset(run.preset.as_deref().unwrap_or("default"))?,
    };
    if let Some(e) = epochs {
        tcfg.epochs = e;
    }
    let seed = run.seed.unwrap_or(tcfg.seed);
    tcfg.seed = seed;
    tcfg.validate()?;
    let mcfg = match run.model.clone() {
        Some(m) => m,
        None => fit_to_data(run.arch.unwrap_or(Arch::Full).config(), &dataset),
    };
    mcfg.validate()?;
    run.seed = Some(seed);
    run.train = Some(tcfg.clone());
    run.model = Some(mcfg.clone());

    let out = out_dir(&run);
    run.echo("train", &out)?;
    let mut model = build_model(&mcfg, seed)?;
    println!("model: {} trainable parameters; {} training samples", model.param_count(), dataset.count(Split::Train));
    let history = run_training(&mut model, &dataset, &tcfg, |r| {
        let val = r.val_acc.map(|v| format!(" val_acc {v:.4}")).unwrap_or_default();
        println!("epoch {:>4} lr {:.3e} loss {:.4} train_acc {:.4}{val}", r.epoch, r.lr, r.train_loss, r.train_acc);
    })?;
    save_checkpoint(&model, &out).map_err(|e| anyhow!(e).context("saving checkpoint"))?;
    write(&out.join("history.csv"), history_csv(&history))?;

    if dataset.count(Split::Train) > 0 {
        let m = evaluate(&model, &dataset, &[Split::Train])?;
        println!("train accuracy {:.4}", m.accuracy);
    }
    if dataset.count(Split::Val) + dataset.count(Split::Test) > 0 {
        let m = evaluate(&model, &dataset, &[Split::Val, Split::Test])?;
        println!("held-out accuracy {:.4}", m.accuracy);
    }
    println!("checkpoint written to {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport<'a> {
    splits: &'a [Split],
    samples: usize,
    classes: &'a [String],
    #[serde(flatten)]
    metrics: &'a Metrics,
}

pub fn eval(common: Common, checkpoint: Option<PathBuf>, data: Option<PathBuf>, splits: Option<Vec<Split>>) -> Outcome {
    let mut run = base(&common)?;
    if checkpoint.is_some() {
        run.checkpoint = checkpoint;
    }
    if data.is_some() {
        run.data = data;
    }
    if let Some(s) = splits {
        run.eval.splits = s;
    }
    let ckpt = require(run.checkpoint.clone(), "--checkpoint")?;
    let data_dir = require(run.data.clone(), "--data")?;
    let model = load_model(&ckpt)?;
    let dataset = load_dataset(&data_dir)?;
    check_compatible(&model, &dataset)?;
    let samples = dataset.in_split(&run.eval.splits);
    if samples.is_empty() {
        return Err(Failure::Runtime(anyhow!("no samples in splits {:?}", run.eval.splits)));
    }
    let metrics = evaluate_samples(&model, &samples)?;

    let out = out_dir(&run);
    run.echo("eval", &out)?;
    let report = EvalReport {
        splits: &run.eval.splits,
        samples: samples.len(),
        classes: &dataset.classes,
        metrics: &metrics,
    };
    write(&out.join("metrics.json"), serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)? + "\n")?;
    write(&out.join("confusion.csv"), metrics.confusion_csv(&dataset.classes))?;
    let correct: usize = (0..metrics.confusion.len()).map(|k| metrics.confusion[k][k]).sum();
    println!("accuracy {:.4} ({correct}/{})", metrics.accuracy, samples.len());
    Ok(())
}

#[derive(Serialize)]
struct GradRow<'a> {
    name: &'a str,
    max_relative_error: f64,
}

#[derive(Serialize)]
struct GradReport<'a> {
    seed: u64,
    eps: f64,
    tolerance: f64,
    loss: f64,
    max_relative_error: f64,
    passed: bool,
    tensors: Vec<GradRow<'a>>,
}

pub fn gradcheck(common: Common, eps: Option<f64>, batch: Option<usize>, tolerance: Option<f64>, fault: Option<f64>) -> Outcome {
    let mut run = base(&common)?;
    let opts = &mut run.gradcheck;
    opts.eps = eps.unwrap_or(opts.eps);
    opts.batch = batch.unwrap_or(opts.batch);
    opts.tolerance = tolerance.unwrap_or(opts.tolerance);
    if !(opts.eps > 0.0) || opts.batch == 0 || !(opts.tolerance > 0.0) {
        return Err(usage("--eps and --tolerance must be positive and --batch at least 1"));
    }
    let cfg = run.model.get_or_insert_with(ModelConfig::tiny).clone();
    let seed = *run.seed.get_or_insert(DEFAULT_SEED);
    let opts = run.gradcheck.clone();

    let report = model_gradcheck(&cfg, seed, opts.batch, opts.eps, fault.map(Fault::ScaleReluGrad))?;
    let width = report.tensors.iter().map(|t| t.name.len()).max().unwrap_or(0);
    let mut offenders = Vec::new();
    for t in &report.tensors {
        let flag = if t.max_relative_error > opts.tolerance {
            offenders.push(t.name.as_str());
            "  FAIL"
        } else {
            ""
        };
        println!("{:<width$}  {:.3e}{flag}", t.name, t.max_relative_error);
    }
    let worst = report.max_relative_error();
    println!(
        "max relative error {worst:.3e} over {} tensors (tolerance {:e}, eps {:e}, seed {seed})",
        report.tensors.len(),
        opts.tolerance,
        opts.eps
    );

    let out = out_dir(&run);
    run.echo("gradcheck", &out)?;
    let summary = GradReport {
        seed,
        eps: opts.eps,
        tolerance: opts.tolerance,
        loss: report.loss,
        max_relative_error: worst,
        passed: offenders.is_empty(),
        tensors: report
            .tensors
            .iter()
            .map(|t| GradRow {
                name: &t.name,
                max_relative_error: t.max_relative_error,
            })
            .collect(),
    };
    write(&out.join("gradcheck.json"), serde_json::to_string_pretty(&summary).map_err(anyhow::Error::from)? + "\n")?;
    if !offenders.is_empty() {
        return Err(Failure::Runtime(anyhow!("{} tensor(s) exceed tolerance: {}", offenders.len(), offenders.join(", "))));
    }
    Ok(())
}

pub fn export_attention(common: Common, checkpoint: Option<PathBuf>, data: Option<PathBuf>, sample: Option<usize>) -> Outcome {
    let mut run = base(&common)?;
    if checkpoint.is_some() {
        run.checkpoint = checkpoint;
    }
    if data.is_some() {
        run.data = data;
    }
    if let Some(i) = sample {
        run.export.sample = i;
    }
    let model = load_model(&require(run.checkpoint.clone(), "--checkpoint")?)?;
    let dataset = load_dataset(&require(run.data.clone(), "--data")?)?;
    check_compatible(&model, &dataset)?;
    let index = run.export.sample;
    let sample = dataset
        .samples
        .get(index)
        .ok_or_else(|| usage(format!("sample {index} out of range; dataset has {}", dataset.samples.len())))?;
    let seq = sample_frames(&sample.data, model.config.frames)?;
    let records = model.attention_records(&seq)?;

    let out = out_dir(&run);
    run.echo("export-attention", &out)?;
    write(&out.join("attention.json"), serde_json::to_string_pretty(&records).map_err(anyhow::Error::from)? + "\n")?;
    println!("{} attention records for sample {index} (label {})", records.len(), dataset.classes[sample.label]);
    Ok(())
}
