//! The five commands as library functions. Each writes a `manifest.json`
//! into its output directory.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tab_core::metrics::{evaluate, evaluate_with, Evaluation, MetricsReport};
use tab_core::model::Variant;
use tab_core::synth::{mean_voting, to_split, Normalizer, Sample};
use tab_core::train::{predict, EpochLog, Split, Trainer};
use tab_core::Tensor;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{generate_dataset, load_dataset, read_gray, write_gray, Dataset, DatasetManifest};
use crate::error::{create_dir, read, read_json, write_atomic, write_json, CliError, Result};
use crate::report::{ablation_svg, ablation_table, AblationSummary};

pub const METRICS_LOG: &str = "metrics.jsonl";
pub const VALIDATION_LOG: &str = "validation.jsonl";

/// Provenance record of one command invocation. Holds no wall-clock data,
/// so reruns reproduce it byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub config: Value,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub build: String,
    pub out: PathBuf,
    pub inputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &RunConfig, config_path: Option<&Path>, seeds: Vec<u64>, out: &Path) -> Self {
        Self {
            command: command.to_string(),
            config_path: config_path.map(Path::to_path_buf),
            config: cfg.to_value(),
            config_hash: cfg.hash(),
            seeds,
            build: build_id(),
            out: out.to_path_buf(),
            inputs: Vec::new(),
        }
    }

    pub fn with_inputs(mut self, inputs: &[&Path]) -> Self {
        self.inputs = inputs.iter().map(|p| p.to_path_buf()).collect();
        self
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("manifest.json"), self)
    }
}

/// Crate version plus the `TAB_BUILD_ID` set at compile time, if any.
pub fn build_id() -> String {
    match option_env!("TAB_BUILD_ID") {
        Some(id) => format!("tab {} ({id})", env!("CARGO_PKG_VERSION")),
        None => format!("tab {}", env!("CARGO_PKG_VERSION")),
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    #[serde(flatten)]
    pub log: EpochLog,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ValidationRecord {
    epoch: usize,
    #[serde(flatten)]
    report: MetricsReport,
}

/// Drops the `wall_ms` field from every line of a metrics log.
pub fn strip_wall_clock(jsonl: &str) -> Result<String> {
    let mut out = String::new();
    for line in jsonl.lines().filter(|l| !l.trim().is_empty()) {
        let mut v: Value = serde_json::from_str(line).map_err(|e| CliError::format(METRICS_LOG, e.to_string()))?;
        if let Value::Object(map) = &mut v {
            map.remove("wall_ms");
        }
        out.push_str(&v.to_string());
        out.push('\n');
    }
    Ok(out)
}

pub fn cmd_generate(cfg: &RunConfig, config_path: Option<&Path>, out: &Path) -> Result<DatasetManifest> {
    create_dir(out)?;
    let m = generate_dataset(out, &cfg.data)?;
    RunManifest::new("generate", cfg, config_path, vec![cfg.data.seed], out).write(out)?;
    Ok(m)
}

fn check_compatible(cfg: &RunConfig, data: &Dataset) -> Result<()> {
    let m = &data.manifest;
    if m.annotators != cfg.model.annotators {
        return Err(CliError::Config(format!(
            "at `model.annotators`: {} but the dataset has {} annotators",
            cfg.model.annotators, m.annotators
        )));
    }
    if !m.image_size.is_multiple_of(cfg.model.encoder.stride) {
        return Err(CliError::Config(format!(
            "dataset images are {0}x{0}, not divisible by the encoder stride {1}",
            m.image_size, cfg.model.encoder.stride
        )));
    }
    if data.train.is_empty() {
        return Err(CliError::Config("the dataset has an empty training split".into()));
    }
    Ok(())
}

fn fit_normalizer(samples: &[Sample]) -> Result<Normalizer> {
    let images: Vec<&[u8]> = samples.iter().map(|s| s.image.as_slice()).collect();
    Ok(Normalizer::fit(&images)?)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions {
    pub resume: bool,
    /// Prints one line per epoch to stderr.
    pub progress: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub evaluation: Evaluation,
    pub epochs: Vec<EpochRecord>,
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CliError::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| CliError::io(path, e))
}

fn read_records(path: &Path, before_epoch: usize) -> Result<Vec<EpochRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = String::from_utf8_lossy(&read(path)?).into_owned();
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let r: EpochRecord = serde_json::from_str(line).map_err(|e| CliError::format(path, e.to_string()))?;
        if r.log.epoch < before_epoch {
            out.push(r);
        }
    }
    Ok(out)
}

fn rewrite_log<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it).expect("record serializes"));
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}

fn write_report(dir: &Path, stem: &str, ev: &Evaluation) -> Result<()> {
    write_json(&dir.join(format!("{stem}.json")), &ev.report)?;
    write_atomic(&dir.join(format!("{stem}.txt")), ev.report.table().as_bytes())?;
    write_json(&dir.join(format!("{stem}_areas.json")), &ev.areas)
}

/// Trains `cfg` on the dataset in `data_dir`, writing the run into `out`:
/// `manifest.json`, `config.json`, `metrics.jsonl`, optional
/// `validation.jsonl`, the checkpoint and the final held-out `report.*`.
pub fn cmd_train(
    cfg: &RunConfig,
    config_path: Option<&Path>,
    data_dir: &Path,
    out: &Path,
    opts: TrainOptions,
) -> Result<TrainOutcome> {
    let data = load_dataset(data_dir)?;
    check_compatible(cfg, &data)?;
    let norm = fit_normalizer(&data.train)?;
    let train: Split<f32> = to_split(&data.train, &norm)?;
    let test: Split<f32> = to_split(&data.test, &norm)?;
    create_dir(out)?;
    let log_path = out.join(METRICS_LOG);
    let val_path = out.join(VALIDATION_LOG);

    let (mut trainer, mut records) = if opts.resume {
        let (t, _) = checkpoint::load(out, cfg, false)?;
        let kept = read_records(&log_path, t.epoch)?;
        if kept.len() != t.epoch {
            return Err(CliError::format(
                &log_path,
                format!("holds {} epochs but the checkpoint is at epoch {}", kept.len(), t.epoch),
            ));
        }
        rewrite_log(&log_path, &kept)?;
        if val_path.exists() {
            let text = String::from_utf8_lossy(&read(&val_path)?).into_owned();
            let vals: Vec<ValidationRecord> = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| serde_json::from_str(l).map_err(|e| CliError::format(&val_path, e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            let vals: Vec<_> = vals.into_iter().filter(|v| v.epoch < t.epoch).collect();
            rewrite_log(&val_path, &vals)?;
        }
        (t, kept)
    } else {
        if checkpoint::bin_path(out).exists() {
            return Err(CliError::Config(format!(
                "{} already holds a checkpoint; resume it or pick another --out",
                out.display()
            )));
        }
        for p in [&log_path, &val_path] {
            if p.exists() {
                std::fs::remove_file(p).map_err(|e| CliError::io(p, e))?;
            }
        }
        (Trainer::<f32>::new(&cfg.model, &cfg.train)?, Vec::new())
    };

    RunManifest::new("train", cfg, config_path, vec![cfg.train.seed], out)
        .with_inputs(&[data_dir])
        .write(out)?;
    write_json(&out.join("config.json"), cfg)?;

    while !trainer.done() {
        let start = Instant::now();
        let log = match trainer.train_epoch(&train) {
            Ok(log) => log,
            Err(tab_core::Error::Numeric(msg)) => {
                write_json(&out.join("abort.json"), &serde_json::json!({ "message": msg }))?;
                return Err(CliError::Numeric(msg));
            }
            Err(e) => return Err(e.into()),
        };
        let record = EpochRecord {
            log,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        append_line(&log_path, &serde_json::to_string(&record).expect("record serializes"))?;
        if opts.progress {
            let l = &record.log;
            eprintln!(
                "epoch {:>3}  lr {:.3e}  loss {:.4}  meta {:.4}  {} ms",
                l.epoch, l.lr, l.loss_total, l.loss_meta, record.wall_ms
            );
        }
        records.push(record);
        checkpoint::save(out, &trainer, cfg, &norm)?;
        let every = cfg.eval.every;
        if every > 0 && trainer.epoch % every == 0 && !trainer.done() && !test.is_empty() {
            let ev = evaluate(&trainer.model, &trainer.params, &test, cfg.eval.batch_size, cfg.train.seed, cfg.hash())?;
            let v = ValidationRecord {
                epoch: trainer.epoch - 1,
                report: ev.report,
            };
            append_line(&val_path, &serde_json::to_string(&v).expect("record serializes"))?;
        }
    }

    let ev = evaluate(&trainer.model, &trainer.params, &test, cfg.eval.batch_size, cfg.train.seed, cfg.hash())?;
    if cfg.eval.every > 0 {
        let v = ValidationRecord {
            epoch: trainer.epoch - 1,
            report: ev.report.clone(),
        };
        append_line(&val_path, &serde_json::to_string(&v).expect("record serializes"))?;
    }
    write_report(out, "report", &ev)?;
    Ok(TrainOutcome {
        evaluation: ev,
        epochs: records,
    })
}

/// Reads the run manifest and config of a training run.
pub fn load_run(run: &Path) -> Result<(RunManifest, RunConfig)> {
    let manifest: RunManifest = read_json(&run.join("manifest.json"))?;
    let path = run.join("config.json");
    let value: Value = read_json(&path)?;
    let cfg = RunConfig::from_value(value, &[]).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        other => other,
    })?;
    Ok((manifest, cfg))
}

/// Evaluates the checkpoint of `run` on one split of the dataset (by
/// default the one it was trained on).
pub fn cmd_eval(run: &Path, data_dir: Option<&Path>, split: &str, out: &Path) -> Result<Evaluation> {
    let (manifest, cfg) = load_run(run)?;
    let data_dir = match data_dir {
        Some(d) => d.to_path_buf(),
        None => manifest
            .inputs
            .first()
            .cloned()
            .ok_or_else(|| CliError::Config("the run records no dataset; pass --data".into()))?,
    };
    let data = load_dataset(&data_dir)?;
    check_compatible(&cfg, &data)?;
    let (trainer, sidecar) = checkpoint::load(run, &cfg, false)?;
    let samples = data.split(split)?;
    let split_t: Split<f32> = to_split(samples, &sidecar.normalizer)?;
    let ev = evaluate(&trainer.model, &trainer.params, &split_t, cfg.eval.batch_size, cfg.train.seed, cfg.hash())?;
    create_dir(out)?;
    write_report(out, &format!("eval_{split}"), &ev)?;
    RunManifest::new("eval", &cfg, None, vec![cfg.train.seed], out)
        .with_inputs(&[run, &data_dir])
        .write(out)?;
    Ok(ev)
}

/// File name of probability map `k` (0 = meta, r = annotator r).
pub fn prob_name(k: usize) -> String {
    if k == 0 {
        "prob_0_meta.png".into()
    } else {
        format!("prob_{k}_a{k}.png")
    }
}

fn to_u8(p: f32) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Scores saved probability maps, one directory per sample id laid out as
/// written by `predict`, against one split of a dataset.
pub fn cmd_eval_predictions(predictions: &Path, data_dir: &Path, split: &str, out: &Path) -> Result<Evaluation> {
    let data = load_dataset(data_dir)?;
    let samples = data.split(split)?;
    let r = data.manifest.annotators;
    let size = data.manifest.image_size;
    let split_t: Split<f32> = to_split(samples, &Normalizer { mean: 0.0, std: 1.0 })?;
    let ev = evaluate_with(&split_t, r, 8, 0, String::new(), |idx| {
        let mut buf = Vec::with_capacity(idx.len() * (r + 1) * size * size);
        for &i in idx {
            for k in 0..=r {
                let path = predictions.join(&samples[i].id).join(prob_name(k));
                let (w, h, px) = read_gray(&path).map_err(|e| tab_core::Error::Data(e.to_string()))?;
                if (w, h) != (size, size) {
                    return Err(tab_core::Error::Data(format!(
                        "{}: map is {w}x{h}, expected {size}x{size}",
                        path.display()
                    )));
                }
                buf.extend(px.iter().map(|&v| v as f32 / 255.0));
            }
        }
        Tensor::new(&[idx.len(), r + 1, size, size], buf)
    })?;
    create_dir(out)?;
    write_report(out, &format!("eval_{split}"), &ev)?;
    let cfg = RunConfig::default();
    RunManifest::new("eval", &cfg, None, Vec::new(), out)
        .with_inputs(&[predictions, data_dir])
        .write(out)?;
    Ok(ev)
}

/// Writes the exact maps an oracle would predict for `split`: the mean
/// voting map as meta and every annotator's own mask.
pub fn write_oracle_predictions(data_dir: &Path, split: &str, out: &Path) -> Result<()> {
    let data = load_dataset(data_dir)?;
    for s in data.split(split)? {
        let dir = out.join(&s.id);
        create_dir(&dir)?;
        let masks: Vec<Tensor<f32>> = s
            .annotators
            .iter()
            .map(|m| Tensor::new(&[m.data.len()], m.data.iter().map(|&v| v as f32).collect()))
            .collect::<tab_core::Result<_>>()?;
        let mv = mean_voting(&masks)?;
        write_gray(&dir.join(prob_name(0)), s.size, s.size, &mv.data().iter().map(|&p| to_u8(p)).collect::<Vec<_>>())?;
        for (r, m) in masks.iter().enumerate() {
            let px: Vec<u8> = m.data().iter().map(|&p| to_u8(p)).collect();
            write_gray(&dir.join(prob_name(r + 1)), s.size, s.size, &px)?;
        }
    }
    Ok(())
}

/// Writes the `R + 1` probability maps of one image and, when the model
/// has a preference extractor, its `(R + 1) * m` attention heatmaps
/// (each scaled to its own maximum).
pub fn cmd_predict(run: &Path, image: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let (_, cfg) = load_run(run)?;
    let (trainer, sidecar) = checkpoint::load(run, &cfg, false)?;
    let (w, h, px) = read_gray(image)?;
    let stride = cfg.model.encoder.stride;
    if w % stride != 0 || h % stride != 0 {
        return Err(CliError::Config(format!(
            "{}: image is {w}x{h}, both sides must be divisible by {stride}",
            image.display()
        )));
    }
    let x: Tensor<f32> = sidecar.normalizer.apply(&px, h, w)?.reshape(&[1, 1, h, w])?;
    let pred = predict(&trainer.model, &trainer.params, &x)?;
    create_dir(out)?;
    let rows = cfg.model.preferences();
    let mut written = Vec::new();
    for k in 0..rows {
        let path = out.join(prob_name(k));
        let map: Vec<u8> = pred.probs.data()[k * h * w..(k + 1) * h * w].iter().map(|&p| to_u8(p)).collect();
        write_gray(&path, w, h, &map)?;
        written.push(path);
    }
    if let Some(hm) = &pred.heatmaps {
        let s = hm.shape();
        let (m, hh, ww) = (s[2], s[3], s[4]);
        for k in 0..rows {
            for j in 0..m {
                let off = (k * m + j) * hh * ww;
                let map = &hm.data()[off..off + hh * ww];
                let peak = map.iter().cloned().fold(0.0f32, f32::max);
                let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
                let path = out.join(format!("heatmap_{k}_{j}.png"));
                write_gray(&path, ww, hh, &map.iter().map(|&v| to_u8(v * scale)).collect::<Vec<_>>())?;
                written.push(path);
            }
        }
    }
    RunManifest::new("predict", &cfg, None, vec![cfg.train.seed], out)
        .with_inputs(&[run, image])
        .write(out)?;
    Ok(written)
}

/// Trains every variant for every seed on one dataset and summarises the
/// held-out reports. Runs go to `out/{variant}/seed{s}`; the dataset is
/// generated into `out/data` unless `data_dir` is given.
pub fn cmd_ablate(
    cfg: &RunConfig,
    config_path: Option<&Path>,
    data_dir: Option<&Path>,
    out: &Path,
    variants: &[Variant],
    seeds: &[u64],
    progress: bool,
) -> Result<AblationSummary> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(CliError::Config("ablate needs at least one variant and one seed".into()));
    }
    create_dir(out)?;
    let data_dir = match data_dir {
        Some(d) => d.to_path_buf(),
        None => {
            let d = out.join("data");
            cmd_generate(cfg, config_path, &d)?;
            d
        }
    };
    let mut rows = Vec::new();
    for &v in variants {
        let mut reports = Vec::new();
        for &seed in seeds {
            let mut c = cfg.clone();
            c.model.variant = v;
            c.train.seed = seed;
            let run = out.join(v.name()).join(format!("seed{seed}"));
            if progress {
                eprintln!("== {} seed {seed}", v.name());
            }
            let done = cmd_train(&c, config_path, &data_dir, &run, TrainOptions { resume: false, progress })?;
            reports.push(done.evaluation.report);
        }
        rows.push((v, reports));
    }
    let summary = AblationSummary::from_runs(&rows);
    write_json(&out.join("ablation.json"), &summary)?;
    write_atomic(&out.join("ablation.txt"), ablation_table(&summary).as_bytes())?;
    write_atomic(&out.join("ablation.svg"), ablation_svg(&summary).as_bytes())?;
    RunManifest::new("ablate", cfg, config_path, seeds.to_vec(), out)
        .with_inputs(&[&data_dir])
        .write(out)?;
    Ok(summary)
}
