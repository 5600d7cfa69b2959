use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::{head_mean_distance, inter_head_cka, HeadDistanceReport, HeadSimilarityReport};
use crate::data::{read_idx_dataset, synthetic_blobs, Dataset};
use crate::error::{Error, Result};
use crate::gradcheck::{run_gradcheck, GradCheckEntry, GradCheckOptions};
use crate::io::{format_float, write_atomic};
use crate::pooling::{pool as pool_maps, PoolingConfig, PoolingStrategy};
use crate::retrieval::{descriptor_rows_to_csv, evaluate, read_descriptors, Metric};
use crate::rng::Rng;
use crate::vit::{load_checkpoint, save_checkpoint, train as train_model, vit_forward, RngInfo, ToyVitModel, TrainingTrace};

use super::activations::read_activations;
use super::config::{DatasetSource, ExperimentConfig};
use super::{AnalyzeArgs, CommonArgs, DatasetArgs, GradcheckArgs, Outcome, PoolArgs, RetrieveArgs, TrainArgs};

/// Gradient scale applied by the hidden `--corrupt-backward` flag.
const CORRUPTION_FACTOR: f64 = 1.5;

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::read(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn apply_dataset_args(cfg: &mut ExperimentConfig, data: &DatasetArgs) {
    if let Some(d) = &data.dataset {
        cfg.dataset = DatasetSource::from(d.as_str());
    }
    if let Some(l) = &data.labels {
        cfg.labels = Some(l.clone());
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => write_atomic(path, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    text
}

/// Loads the configured dataset and checks it against the model shape.
pub(crate) fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let idx = match &cfg.dataset {
        DatasetSource::Synthetic => synthetic_blobs(&cfg.blob_spec())?,
        DatasetSource::Idx(images) => {
            let labels = cfg
                .labels
                .as_ref()
                .ok_or_else(|| Error::invalid("an IDX dataset needs --labels (or `labels =` in the config)"))?;
            read_idx_dataset(images, labels)?
        }
    };
    if idx.rows != cfg.image_size || idx.cols != cfg.image_size {
        return Err(Error::invalid(format!(
            "dataset images are {}×{} but image_size is {}",
            idx.rows, idx.cols, cfg.image_size
        )));
    }
    if cfg.channels_in != 1 {
        return Err(Error::invalid(format!(
            "datasets are grayscale but channels_in is {}",
            cfg.channels_in
        )));
    }
    Dataset::from_idx(&idx, Some(cfg.classes))
}

#[derive(Serialize)]
struct GradcheckJson<'a> {
    passed: bool,
    tolerance: f64,
    max_error: f64,
    entries: &'a [GradCheckEntry],
}

pub fn gradcheck(args: GradcheckArgs) -> Result<Outcome> {
    let mut opts = GradCheckOptions::default();
    if args.common.config.is_some() {
        opts.config = load_config(&args.common)?.model_config()?;
    }
    if let Some(seed) = args.common.seed {
        opts.seed = seed;
    }
    if args.corrupt_backward {
        opts.corrupt_backward = Some(CORRUPTION_FACTOR);
    }
    let report = run_gradcheck(&opts)?;
    let json = GradcheckJson {
        passed: report.passed(),
        tolerance: report.tolerance,
        max_error: report.max_error(),
        entries: &report.entries,
    };
    emit(args.out.as_deref(), &to_json(&json))?;
    if let Some(worst) = report.worst() {
        eprintln!(
            "gradcheck: {} tensors, max relative error {:.3e} ({}), tolerance {:.0e}",
            report.entries.len(),
            worst.max_relative_error,
            worst.name,
            report.tolerance
        );
    }
    Ok(if report.passed() {
        Outcome::Success
    } else {
        eprintln!("gradcheck: FAILED");
        Outcome::CheckFailed
    })
}

fn trace_path(out: &Path) -> PathBuf {
    out.with_extension("trace.csv")
}

fn run_training(cfg: &ExperimentConfig, dataset: &Dataset, out: &Path, trace: &Path) -> Result<TrainingTrace> {
    let model_cfg = cfg.model_config()?;
    let rng = RngInfo::from(&Rng::new(cfg.seed));
    match train_model(dataset, &model_cfg, &cfg.train_config()) {
        Ok((model, trace_data)) => {
            save_checkpoint(out, &model, rng)?;
            write_atomic(trace, trace_data.to_csv().as_bytes())?;
            Ok(trace_data)
        }
        Err(Error::Diverged { epoch, step, last_good }) => {
            eprintln!(
                "training diverged at epoch {epoch}, step {step}; saving the last finite parameters to {}",
                out.display()
            );
            save_checkpoint(out, &last_good, rng)?;
            Err(Error::Diverged { epoch, step, last_good })
        }
        Err(e) => Err(e),
    }
}

pub fn train(args: TrainArgs) -> Result<Outcome> {
    let mut cfg = load_config(&args.common)?;
    apply_dataset_args(&mut cfg, &args.data);
    if let Some(spec) = &args.sweep {
        return sweep(&cfg, spec, &args.out);
    }
    let model_cfg = cfg.model_config()?;
    cfg.train_config().validate()?;
    let dataset = load_dataset(&cfg)?;
    log::info!("training {} images with {:?} pooling", dataset.len(), model_cfg.pooling.strategy);
    let trace_out = args.trace.clone().unwrap_or_else(|| trace_path(&args.out));
    let trace = run_training(&cfg, &dataset, &args.out, &trace_out)?;
    if let Some(last) = trace.last() {
        eprintln!(
            "epoch {}: loss {:.4}, accuracy {:.3}; checkpoint {}, trace {}",
            last.epoch,
            last.loss,
            last.accuracy,
            args.out.display(),
            trace_out.display()
        );
    }
    Ok(Outcome::Success)
}

#[derive(Debug, Clone, Serialize)]
struct SweepRun {
    key: String,
    value: String,
    resolved: String,
    checkpoint: PathBuf,
    trace: PathBuf,
    final_loss: f64,
    final_accuracy: f64,
    initial_exponents: Vec<f64>,
    final_exponents: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct SweepReport {
    key: String,
    runs: Vec<SweepRun>,
    /// Values ordered from lowest to highest final training loss.
    ranking_by_loss: Vec<String>,
    best_by_loss: String,
    best_by_accuracy: String,
}

/// `H` and `D` in a `groups` sweep stand for the head count and the width.
fn resolve_sweep_value(cfg: &ExperimentConfig, key: &str, value: &str) -> String {
    match (key, value) {
        ("groups", "H") => cfg.heads.to_string(),
        ("groups", "D") => cfg.embed_dim.to_string(),
        _ => value.to_string(),
    }
}

fn parse_sweep(spec: &str) -> Result<(String, Vec<String>)> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| Error::invalid(format!("--sweep expects KEY=V1,V2,..., got {spec:?}")))?;
    let key = key.trim().to_string();
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
    if values.iter().any(String::is_empty) {
        return Err(Error::invalid(format!("--sweep {spec:?} has an empty value")));
    }
    let mut seen = BTreeSet::new();
    if let Some(dup) = values.iter().find(|v| !seen.insert(v.as_str())) {
        return Err(Error::invalid(format!("--sweep repeats the value {dup}")));
    }
    Ok((key, values))
}

fn sweep(base: &ExperimentConfig, spec: &str, out_dir: &Path) -> Result<Outcome> {
    let (key, values) = parse_sweep(spec)?;
    let mut configs = Vec::with_capacity(values.len());
    for value in &values {
        let mut cfg = base.clone();
        let resolved = resolve_sweep_value(base, &key, value);
        cfg.set(&key, &resolved).map_err(|m| Error::invalid(format!("--sweep: {m}")))?;
        cfg.model_config()?;
        cfg.train_config().validate()?;
        configs.push((value.clone(), resolved, cfg));
    }
    let dataset = load_dataset(base)?;
    for (_, _, cfg) in &configs {
        if cfg.image_size != base.image_size || cfg.classes != base.classes || cfg.dataset != base.dataset {
            return Err(Error::invalid(format!("--sweep over {key} would change the dataset")));
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let runs: Vec<SweepRun> = configs
        .par_iter()
        .map(|(value, resolved, cfg)| {
            let stem = format!("{key}_{value}");
            let checkpoint = out_dir.join(format!("{stem}.ggem"));
            let trace_file = out_dir.join(format!("{stem}.trace.csv"));
            let trace = run_training(cfg, &dataset, &checkpoint, &trace_file)?;
            let first = trace.records.first().expect("trace has the epoch-0 row");
            let last = trace.last().expect("trace has the epoch-0 row");
            Ok(SweepRun {
                key: key.clone(),
                value: value.clone(),
                resolved: resolved.clone(),
                checkpoint,
                trace: trace_file,
                final_loss: last.loss,
                final_accuracy: last.accuracy,
                initial_exponents: first.exponents.clone(),
                final_exponents: last.exponents.clone(),
            })
        })
        .collect::<Result<_>>()?;

    let mut by_loss: Vec<&SweepRun> = runs.iter().collect();
    by_loss.sort_by(|a, b| a.final_loss.total_cmp(&b.final_loss));
    let best_by_accuracy = runs
        .iter()
        .fold(None::<&SweepRun>, |best, r| match best {
            Some(b) if b.final_accuracy >= r.final_accuracy => Some(b),
            _ => Some(r),
        })
        .expect("at least one run");
    let report = SweepReport {
        key: key.clone(),
        ranking_by_loss: by_loss.iter().map(|r| r.value.clone()).collect(),
        best_by_loss: by_loss[0].value.clone(),
        best_by_accuracy: best_by_accuracy.value.clone(),
        runs: runs.clone(),
    };
    write_atomic(&out_dir.join("sweep_report.json"), to_json(&report).as_bytes())?;

    for r in &runs {
        let mean_p = (!r.final_exponents.is_empty())
            .then(|| r.final_exponents.iter().sum::<f64>() / r.final_exponents.len() as f64);
        eprintln!(
            "{key}={}: loss {}, accuracy {}{}",
            r.value,
            format_float(r.final_loss),
            format_float(r.final_accuracy),
            mean_p.map_or(String::new(), |m| format!(", mean final p {}", format_float(m)))
        );
    }
    eprintln!(
        "{key}: lowest final loss at {}, highest accuracy at {}; ranking by loss {}",
        report.best_by_loss,
        report.best_by_accuracy,
        report.ranking_by_loss.join(" < ")
    );
    Ok(Outcome::Success)
}

fn select_blocks(spec: &str, blocks: usize) -> Result<Vec<usize>> {
    let selected = match spec.trim() {
        "last" => vec![blocks - 1],
        "all" => (0..blocks).collect(),
        list => {
            let mut out = BTreeSet::new();
            for item in list.split(',') {
                let b: usize = item
                    .trim()
                    .parse()
                    .map_err(|_| Error::invalid(format!("--blocks: {item:?} is not a block index")))?;
                if b >= blocks {
                    return Err(Error::invalid(format!(
                        "--blocks: block {b} out of range for a {blocks}-block model (0..{})",
                        blocks - 1
                    )));
                }
                out.insert(b);
            }
            out.into_iter().collect()
        }
    };
    Ok(selected)
}

#[derive(Serialize)]
struct BlockAnalysis {
    similarity: HeadSimilarityReport,
    distance: HeadDistanceReport,
}

#[derive(Serialize)]
struct AnalysisJson {
    checkpoint: PathBuf,
    images: usize,
    blocks: Vec<BlockAnalysis>,
}

fn opt_csv(v: Option<f64>) -> String {
    v.map_or(String::new(), format_float)
}

pub fn analyze(args: AnalyzeArgs) -> Result<Outcome> {
    let (model, _) = load_checkpoint(&args.checkpoint)?;
    let blocks = select_blocks(&args.blocks, model.config.blocks)?;
    let mut cfg = load_config(&args.common)?;
    apply_dataset_args(&mut cfg, &args.data);
    if args.common.config.is_none() {
        cfg.image_size = model.config.image_size;
        cfg.channels_in = model.config.channels_in;
        cfg.classes = model.config.classes;
    } else if cfg.image_size != model.config.image_size || cfg.channels_in != model.config.channels_in {
        return Err(Error::invalid("config image shape differs from the checkpoint"));
    }
    let dataset = load_dataset(&cfg)?;
    let count = args.images.map_or(dataset.len(), |n| n.min(dataset.len()));
    if count == 0 {
        return Err(Error::invalid("--images must be at least 1"));
    }
    let records = capture(&model, &dataset.images[..count])?;

    let mut analyses = Vec::with_capacity(blocks.len());
    for &b in &blocks {
        analyses.push(BlockAnalysis {
            similarity: inter_head_cka(&records, b)?,
            distance: head_mean_distance(&records, b, model.config.patch_size)?,
        });
    }

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mut sim_csv = String::from("block,head,mean_cka\n");
    let mut dist_csv = String::from("block,head,mean_distance_px\n");
    for a in &analyses {
        for (h, v) in a.similarity.per_head_mean.iter().enumerate() {
            sim_csv.push_str(&format!("{},{h},{}\n", a.similarity.block, opt_csv(*v)));
        }
        for (h, v) in a.distance.per_head.iter().enumerate() {
            dist_csv.push_str(&format!("{},{h},{}\n", a.distance.block, opt_csv(*v)));
        }
        eprintln!(
            "block {}: mean inter-head CKA {}, mean attention distance {} px",
            a.similarity.block,
            opt_csv(a.similarity.overall_mean),
            opt_csv(a.distance.block_mean)
        );
    }
    let json = AnalysisJson {
        checkpoint: args.checkpoint.clone(),
        images: count,
        blocks: analyses,
    };
    write_atomic(&args.out.join("analysis.json"), to_json(&json).as_bytes())?;
    write_atomic(&args.out.join("head_similarity.csv"), sim_csv.as_bytes())?;
    write_atomic(&args.out.join("head_distance.csv"), dist_csv.as_bytes())?;
    Ok(Outcome::Success)
}

fn capture(model: &ToyVitModel, images: &[crate::tensor::Tensor]) -> Result<Vec<crate::vit::AttentionRecord>> {
    images
        .par_iter()
        .map(|img| {
            vit_forward(img, model, true)?
                .record
                .ok_or_else(|| Error::InvalidState("forward pass did not capture attention".into()))
        })
        .collect()
}

pub fn pool(args: PoolArgs) -> Result<Outcome> {
    let strategy: PoolingStrategy = args.strategy.parse()?;
    if strategy != PoolingStrategy::Ggem && args.groups != 1 {
        return Err(Error::invalid(format!("--groups applies to ggem only, not {strategy}")));
    }
    let single_p = || match args.p.as_slice() {
        [p] => Ok(*p),
        _ => Err(Error::invalid(format!("{strategy} pooling takes one --p value"))),
    };
    let cfg = match strategy {
        PoolingStrategy::ClassToken => PoolingConfig::class_token(),
        PoolingStrategy::Average => PoolingConfig::average(),
        PoolingStrategy::Max => PoolingConfig::max(),
        PoolingStrategy::Gem => PoolingConfig::gem(single_p()?),
        PoolingStrategy::Ggem => match args.p.len() {
            1 => PoolingConfig::ggem_uniform(args.groups, args.p[0]),
            n if n == args.groups => PoolingConfig::ggem(args.p.clone()),
            n => {
                return Err(Error::invalid(format!(
                    "--p has {n} values for {} groups; give one value or one per group",
                    args.groups
                )))
            }
        },
    }
    .with_clamp_eps(args.clamp_eps);

    let input = read_activations(&args.input)?;
    let channels = input.maps[0].channels();
    if let Some(i) = input.maps.iter().position(|m| m.channels() != channels) {
        return Err(Error::invalid(format!(
            "map {} has {} channels, map {} has {channels}",
            input.ids[i],
            input.maps[i].channels(),
            input.ids[0]
        )));
    }
    cfg.validate(Some(channels))?;
    let pooled = input
        .maps
        .iter()
        .map(|m| pool_maps(m, &cfg))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<&[f64]> = pooled.iter().map(|v| v.as_slice()).collect();
    emit(args.out.as_deref(), &descriptor_rows_to_csv(&input.ids, &input.labels, &rows))?;
    eprintln!("pooled {} maps with {strategy} into {channels}-dim descriptors", rows.len());
    Ok(Outcome::Success)
}

pub fn retrieve(args: RetrieveArgs) -> Result<Outcome> {
    let metric: Metric = args.metric.parse()?;
    let queries = read_descriptors(&args.queries)?;
    let (gallery, self_exclude) = match &args.gallery {
        Some(path) => (read_descriptors(path)?, args.self_exclude),
        None => (queries.clone(), true),
    };
    let report = evaluate(&queries, &gallery, &args.ks, self_exclude, metric)?;
    emit(args.out.as_deref(), &to_json(&report))?;
    let recalls: Vec<String> = report
        .recall_at_k
        .iter()
        .map(|(k, r)| format!("R@{k} {}", format_float(*r)))
        .collect();
    eprintln!(
        "{} queries ({} skipped): {}, RP {}, mAP {}",
        report.evaluated,
        report.skipped,
        recalls.join(", "),
        format_float(report.r_precision),
        format_float(report.map_score)
    );
    Ok(Outcome::Success)
}
