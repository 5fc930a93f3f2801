use std::fs;
use std::path::{Path, PathBuf};

use clapt::corpus::{load_class_names, load_corpus, save_class_names, save_corpus, SplitManifest};
use clapt::evalkit::{histogram, save_detections, save_report, write_histogram_csv, FeatureTable};
use clapt::experiment::{
    aggregate, feature_table, run_ablation, run_analysis, run_fewshot, run_grounding, run_tal,
    write_ablation_csv, Dataset, RunConfig, METRIC_COLUMNS,
};
use clapt::losses::Objective;
use clapt::model::{load_checkpoint, Checkpoint};
use clapt::provenance::{config_hash, CODE_VERSION};
use clapt::trainer::{extract_features, load_features, save_features, train as run_training};
use clapt::{Error, Execution, Result};
use serde::Serialize;

use super::{AnalyzeArgs, DataPaths, EvalArgs};

/// Report body with provenance fields at the top level.
#[derive(Serialize)]
struct Report<'a, T> {
    code_version: &'a str,
    config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint_config_hash: Option<&'a str>,
    #[serde(flatten)]
    body: T,
}

fn report<'a, T>(cfg: &RunConfig, ckpt: Option<&'a Checkpoint>, body: T) -> Report<'a, T> {
    Report {
        code_version: CODE_VERSION,
        config_hash: config_hash(cfg),
        checkpoint_config_hash: ckpt.map(|c| c.meta.config_hash.as_str()),
        body,
    }
}

fn required(path: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    path.clone().ok_or_else(|| Error::Usage(format!("{flag} is required")))
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

fn load_dataset(paths: &DataPaths) -> Result<Dataset> {
    let corpus_path = required(&paths.corpus, "--corpus")?;
    let manifest_path = paths.manifest.clone().unwrap_or_else(|| sibling(&corpus_path, "splits.json"));
    let classes_path = paths.classes.clone().unwrap_or_else(|| sibling(&corpus_path, "classes.json"));
    let corpus = load_corpus(&corpus_path)?;
    let manifest = SplitManifest::load(&manifest_path)?;
    let class_names = load_class_names(&classes_path)?;
    let known: std::collections::HashSet<&str> = corpus.iter().map(|v| v.id.as_str()).collect();
    if let Some(id) = manifest
        .train_videos
        .iter()
        .chain(&manifest.val_videos)
        .find(|id| !known.contains(id.as_str()))
    {
        return Err(Error::Data(format!(
            "manifest {} lists video {id}, absent from corpus {}",
            manifest_path.display(),
            corpus_path.display()
        )));
    }
    Ok(Dataset {
        corpus,
        class_names,
        manifest,
    })
}

fn features_for(ckpt: &Checkpoint, data: &Dataset, features: &Option<PathBuf>, exec: Execution) -> Result<FeatureTable> {
    match features {
        Some(p) => Ok(FeatureTable::new(load_features(p)?)),
        None => feature_table(&ckpt.model, &data.corpus, exec),
    }
}

fn eval_seed(cfg: &RunConfig) -> u64 {
    cfg.seeds.first().copied().unwrap_or(0)
}

pub fn gen_data(cfg: &RunConfig, out: Option<PathBuf>, exec: Execution) -> Result<()> {
    let out = match out {
        Some(p) => p,
        None => cfg
            .out_dir
            .as_ref()
            .map(|d| d.join("corpus.jsonl"))
            .ok_or_else(|| Error::Usage("--out is required".into()))?,
    };
    create_parent(&out)?;
    let data = Dataset::generate(cfg, exec)?;
    save_corpus(&data.corpus, &out)?;
    save_class_names(&data.class_names, sibling(&out, "classes.json"))?;
    data.manifest.save(sibling(&out, "splits.json"))?;
    println!(
        "wrote {} videos, {} classes ({} base, {} novel) to {}",
        data.corpus.len(),
        data.class_names.len(),
        data.manifest.base_classes.len(),
        data.manifest.novel_classes().len(),
        out.display()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig, paths: &DataPaths, base_only: bool) -> Result<()> {
    let dir = required(&cfg.out_dir, "--out")?;
    let data = load_dataset(paths)?;
    let corpus = if base_only {
        data.base_pretrain_corpus()
    } else {
        data.pretrain_corpus()
    };
    let mut train_cfg = cfg.train.clone();
    train_cfg.model.n_classes = data.class_names.len();
    if let Some(v) = data.corpus.first() {
        train_cfg.model.d_raw = v.feature_dim();
    }
    let outcome = run_training(&corpus, &data.class_names, &train_cfg, Some(&dir))?;
    let last = outcome.log.epochs.last().map_or(f64::NAN, |e| e.mean_loss);
    println!(
        "trained {} on {} videos for {} epochs (final mean loss {last:.6}); checkpoint in {}",
        train_cfg.objective,
        corpus.len(),
        outcome.meta.epochs_completed,
        dir.display()
    );
    Ok(())
}

pub fn extract(checkpoint: &Path, paths: &DataPaths, out: &Path, exec: Execution) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let corpus = load_corpus(required(&paths.corpus, "--corpus")?)?;
    let features = extract_features(&ckpt.model, &corpus, exec)?;
    create_parent(out)?;
    save_features(&features, out)?;
    println!("wrote features of {} videos to {}", features.len(), out.display());
    Ok(())
}

pub fn eval_tal(cfg: &RunConfig, args: &EvalArgs, exec: Execution) -> Result<()> {
    let data = load_dataset(&args.data)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let features = features_for(&ckpt, &data, &args.features, exec)?;
    let outcome = run_tal(&data, &features, cfg, exec)?;
    create_parent(&args.out)?;
    save_report(&report(cfg, Some(&ckpt), &outcome.report), &args.out)?;
    if let Some(p) = &args.detections {
        create_parent(p)?;
        save_detections(&outcome.detections, p)?;
    }
    let r = &outcome.report;
    println!(
        "mAP@0.5 {:.4}  mAP@0.75 {:.4}  mAP@0.95 {:.4}  AmAP {:.4}",
        r.map_050, r.map_075, r.map_095, r.amap
    );
    Ok(())
}

pub fn eval_fewshot(cfg: &RunConfig, args: &EvalArgs, exec: Execution) -> Result<()> {
    let data = load_dataset(&args.data)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let features = features_for(&ckpt, &data, &args.features, exec)?;
    let fs = run_fewshot(&data, &features, &ckpt.meta, cfg, eval_seed(cfg), exec)?;
    create_parent(&args.out)?;
    save_report(&report(cfg, Some(&ckpt), &fs), &args.out)?;
    println!(
        "{}-shot over {} episodes: AmAP {:.4} ± {:.4}",
        fs.shots,
        fs.episodes.len(),
        fs.mean.amap,
        fs.std.amap
    );
    Ok(())
}

#[derive(Serialize)]
struct GroundingOut<'a> {
    scorer: &'a str,
    #[serde(rename = "recall@0.5")]
    recall_050: Option<f64>,
    #[serde(rename = "recall@0.7")]
    recall_070: Option<f64>,
    #[serde(rename = "mIoU")]
    miou: f64,
    n_queries: usize,
    details: &'a clapt::evalkit::GroundingReport,
    random_baseline: &'a clapt::evalkit::GroundingReport,
}

pub fn eval_grounding(cfg: &RunConfig, args: &EvalArgs, exec: Execution) -> Result<()> {
    let data = load_dataset(&args.data)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let features = features_for(&ckpt, &data, &args.features, exec)?;
    let objective = match &ckpt.meta.objective {
        Some(name) => name.parse()?,
        None => Objective::Tac,
    };
    let run = run_grounding(&data, &ckpt.model, objective, &features, cfg, eval_seed(cfg), exec)?;
    let body = GroundingOut {
        scorer: &run.scorer,
        recall_050: run.report.recall_at(0.5),
        recall_070: run.report.recall_at(0.7),
        miou: run.report.miou,
        n_queries: run.report.n_queries,
        details: &run.report,
        random_baseline: &run.random_baseline,
    };
    create_parent(&args.out)?;
    save_report(&report(cfg, Some(&ckpt), body), &args.out)?;
    println!(
        "{} queries ({} scorer): recall@0.5 {:.4}  recall@0.7 {:.4}  mIoU {:.4}",
        run.report.n_queries,
        run.scorer,
        run.report.recall_at(0.5).unwrap_or(f64::NAN),
        run.report.recall_at(0.7).unwrap_or(f64::NAN),
        run.report.miou
    );
    Ok(())
}

pub fn analyze(cfg: &RunConfig, args: &AnalyzeArgs, exec: Execution) -> Result<()> {
    let data = load_dataset(&args.data)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let features = features_for(&ckpt, &data, &args.features, exec)?;
    let dist = run_analysis(&data, &features, eval_seed(cfg), exec)?;
    let diffs: Vec<f64> = dist.videos.iter().map(|d| d.difference).collect();
    let bins = histogram(&diffs, cfg.analysis.bins)?;
    let hist_path = args.histogram.clone().unwrap_or_else(|| args.out.with_extension("csv"));
    create_parent(&args.out)?;
    create_parent(&hist_path)?;
    save_report(&report(cfg, Some(&ckpt), &dist), &args.out)?;
    write_histogram_csv(&bins, &hist_path)?;
    println!(
        "median fg2bg - fg2fg {:.4} over {} videos ({} skipped); histogram in {}",
        dist.median_difference,
        dist.videos.len(),
        dist.skipped,
        hist_path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct AblationOut<'a> {
    seeds: &'a [u64],
    variants: Vec<&'static str>,
    table: &'static str,
    cells: &'a [clapt::experiment::CellResult],
}

pub fn repro_ablation(cfg: &RunConfig, exec: Execution) -> Result<()> {
    let dir = required(&cfg.out_dir, "--out")?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let data = Dataset::generate(cfg, exec)?;
    let cells = run_ablation(&data, cfg, exec)?;
    let csv_path = dir.join("ablation.csv");
    write_ablation_csv(&cells, &csv_path)?;
    let body = AblationOut {
        seeds: &cfg.seeds,
        variants: cfg.variants.iter().map(|v| v.name()).collect(),
        table: "ablation.csv",
        cells: &cells,
    };
    save_report(&report(cfg, None, body), dir.join("ablation.json"))?;
    let failed = cells.iter().filter(|c| c.outcome.is_err()).count();
    for a in aggregate(&cells) {
        let shown: Vec<String> = METRIC_COLUMNS
            .iter()
            .zip(a.mean.iter().zip(&a.std))
            .filter_map(|(name, (m, s))| Some(format!("{name} {:.4}±{:.4}", (*m)?, (*s)?)))
            .collect();
        println!("{:12} {:10} {}", a.variant.name(), a.task.name(), shown.join("  "));
    }
    println!("{} cells, {failed} failed; table in {}", cells.len(), csv_path.display());
    Ok(())
}
