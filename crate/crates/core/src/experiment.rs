//! End-to-end runs: one merged configuration, the generated dataset, the
//! three downstream tasks and the variant × task × seed ablation table.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{
    class_names, generate_corpus_with, select_videos, GeneratorConfig, SplitManifest,
    UntrimmedVideo,
};
use crate::error::{Error, Result};
use crate::evalkit::{
    captions_as_queries, check_no_leakage, evaluate_fewshot, evaluate_grounding, evaluate_tal,
    feature_distance_analysis, AmapGrid, DistanceReport, EpisodeSpec, FeatureTable, FewshotReport,
    GroundingConfig, GroundingReport, GroundingScorer, ProjectionScorer, RandomQueryScorer,
    TalConfig, TalOutcome, TextMapScorer, WindowConfig,
};
use crate::exec::Execution;
use crate::losses::Objective;
use crate::model::{CheckpointMeta, ModelState};
use crate::trainer::{extract_features, train, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_fraction: f64,
    /// Share of classes in the (base, novel-val, novel-test) partitions.
    pub class_ratios: (f64, f64, f64),
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            class_ratios: (0.8, 0.1, 0.1),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FewshotConfig {
    pub shots: usize,
    pub episodes: usize,
    pub prototype_temperature: f64,
    pub windows: WindowConfig,
    pub amap_grid: AmapGrid,
}

impl Default for FewshotConfig {
    fn default() -> Self {
        let spec = EpisodeSpec::default();
        Self {
            shots: spec.shots,
            episodes: spec.episodes,
            prototype_temperature: spec.prototype_temperature,
            windows: spec.windows,
            amap_grid: spec.amap_grid,
        }
    }
}

impl FewshotConfig {
    pub fn episode_spec(&self, manifest: &SplitManifest, seed: u64) -> EpisodeSpec {
        EpisodeSpec {
            base_classes: manifest.base_classes.clone(),
            val_classes: manifest.novel_val_classes.clone(),
            test_classes: manifest.novel_test_classes.clone(),
            shots: self.shots,
            episodes: self.episodes,
            seed,
            prototype_temperature: self.prototype_temperature,
            windows: self.windows.clone(),
            amap_grid: self.amap_grid,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub bins: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { bins: 20 }
    }
}

/// Everything a run needs, validated before any work starts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub split: SplitConfig,
    pub train: TrainConfig,
    pub tal: TalConfig,
    pub fewshot: FewshotConfig,
    pub grounding: GroundingConfig,
    pub analysis: AnalysisConfig,
    /// Seeds of the ablation runs.
    pub seeds: Vec<u64>,
    pub variants: Vec<Objective>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            split: SplitConfig::default(),
            train: TrainConfig::default(),
            tal: TalConfig::default(),
            fewshot: FewshotConfig::default(),
            grounding: GroundingConfig::default(),
            analysis: AnalysisConfig::default(),
            seeds: (0..5).collect(),
            variants: vec![
                Objective::Tac,
                Objective::ClapClip,
                Objective::ClapMask,
                Objective::Clap,
                Objective::ClapDagger,
            ],
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.train.validate()?;
        let m = &self.train.model;
        if m.d_raw != self.generator.d_raw {
            return Err(Error::Config(format!(
                "model d_raw {} differs from generator d_raw {}",
                m.d_raw, self.generator.d_raw
            )));
        }
        if m.n_classes != self.generator.n_classes {
            return Err(Error::Config(format!(
                "model n_classes {} differs from generator n_classes {}",
                m.n_classes, self.generator.n_classes
            )));
        }
        if !(0.0 < self.split.train_fraction && self.split.train_fraction < 1.0) {
            return Err(Error::Config("split.train_fraction must lie in (0, 1)".into()));
        }
        self.tal.windows.validate()?;
        self.tal.probe.validate()?;
        self.fewshot.windows.validate()?;
        if self.fewshot.shots == 0 || self.fewshot.episodes == 0 {
            return Err(Error::Config("fewshot shots and episodes must be positive".into()));
        }
        if !(self.fewshot.prototype_temperature > 0.0) {
            return Err(Error::Config("fewshot prototype_temperature must be positive".into()));
        }
        self.grounding.windows.validate()?;
        self.grounding.text_map.validate()?;
        if self.analysis.bins == 0 {
            return Err(Error::Config("analysis.bins must be positive".into()));
        }
        if self.seeds.is_empty() || self.variants.is_empty() {
            return Err(Error::Config("ablation needs at least one seed and one variant".into()));
        }
        Ok(())
    }

    /// Training settings for one variant and seed.
    pub fn train_config(&self, objective: Objective, seed: u64) -> TrainConfig {
        TrainConfig {
            objective,
            seed,
            ..self.train.clone()
        }
    }
}

/// A generated corpus with its class vocabulary and split manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub corpus: Vec<UntrimmedVideo>,
    pub class_names: Vec<String>,
    pub manifest: SplitManifest,
}

impl Dataset {
    pub fn generate(cfg: &RunConfig, exec: Execution) -> Result<Self> {
        let corpus = generate_corpus_with(&cfg.generator, exec)?;
        let manifest = SplitManifest::build(
            &corpus,
            cfg.generator.n_classes,
            cfg.split.train_fraction,
            cfg.split.class_ratios,
            cfg.split.seed,
        )?;
        Ok(Self {
            class_names: class_names(cfg.generator.n_classes),
            corpus,
            manifest,
        })
    }

    pub fn train_videos(&self) -> Vec<&UntrimmedVideo> {
        select_videos(&self.corpus, &self.manifest.train_videos)
    }

    pub fn val_videos(&self) -> Vec<&UntrimmedVideo> {
        select_videos(&self.corpus, &self.manifest.val_videos)
    }

    /// Training-split videos used for post-pre-training in the TAL and
    /// grounding protocols.
    pub fn pretrain_corpus(&self) -> Vec<UntrimmedVideo> {
        self.train_videos().into_iter().cloned().collect()
    }

    /// Training-split videos whose action is a base class; novel classes are
    /// never shown to the few-shot backbone.
    pub fn base_pretrain_corpus(&self) -> Vec<UntrimmedVideo> {
        self.train_videos()
            .into_iter()
            .filter(|v| self.manifest.base_classes.contains(&v.primary_class))
            .cloned()
            .collect()
    }

    /// Every video of a novel class, from either split.
    pub fn novel_videos(&self) -> Vec<&UntrimmedVideo> {
        let novel = self.manifest.novel_classes();
        self.corpus.iter().filter(|v| novel.contains(&v.primary_class)).collect()
    }
}

pub fn feature_table(model: &ModelState, corpus: &[UntrimmedVideo], exec: Execution) -> Result<FeatureTable> {
    Ok(FeatureTable::new(extract_features(model, corpus, exec)?))
}

/// Fits the probe on training-split features and localizes on the
/// validation split.
pub fn run_tal(data: &Dataset, features: &FeatureTable, cfg: &RunConfig, exec: Execution) -> Result<TalOutcome> {
    evaluate_tal(
        &data.train_videos(),
        &data.val_videos(),
        features,
        data.class_names.len(),
        &cfg.tal,
        exec,
    )
}

/// Few-shot episodes over the novel classes; refuses features from a
/// checkpoint that saw any of them.
pub fn run_fewshot(
    data: &Dataset,
    features: &FeatureTable,
    meta: &CheckpointMeta,
    cfg: &RunConfig,
    seed: u64,
    exec: Execution,
) -> Result<FewshotReport> {
    let spec = cfg.fewshot.episode_spec(&data.manifest, seed);
    check_no_leakage(meta.seen_classes.as_deref(), &spec.novel_classes())?;
    evaluate_fewshot(&data.novel_videos(), features, &spec, exec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingRun {
    /// `projection` for models with trained projections, `text-map` otherwise.
    pub scorer: String,
    pub report: GroundingReport,
    /// Same windows ranked against random unit queries.
    pub random_baseline: GroundingReport,
}

/// Grounds validation-split captions. Objectives without a contrastive term
/// leave the projections untrained, so a text map fitted on training
/// captions stands in for them.
pub fn run_grounding(
    data: &Dataset,
    model: &ModelState,
    objective: Objective,
    features: &FeatureTable,
    cfg: &RunConfig,
    seed: u64,
    exec: Execution,
) -> Result<GroundingRun> {
    let queries = captions_as_queries(&data.val_videos());
    let (name, scorer): (&str, Box<dyn GroundingScorer>) = if objective.contrastive().is_some() {
        ("projection", Box::new(ProjectionScorer::new(model)))
    } else {
        let map = TextMapScorer::fit(&data.train_videos(), features, &model.text_table, &cfg.grounding.text_map)?;
        ("text-map", Box::new(map))
    };
    let report = evaluate_grounding(&queries, features, scorer.as_ref(), &cfg.grounding, exec)?;
    let random = RandomQueryScorer::new(model, seed);
    let random_baseline = evaluate_grounding(&queries, features, &random, &cfg.grounding, exec)?;
    Ok(GroundingRun {
        scorer: name.to_string(),
        report,
        random_baseline,
    })
}

/// fg2fg / fg2bg distances over validation-split videos.
pub fn run_analysis(data: &Dataset, features: &FeatureTable, seed: u64, exec: Execution) -> Result<DistanceReport> {
    feature_distance_analysis(&data.val_videos(), features, seed, exec)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Tal,
    Fewshot,
    Grounding,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Tal, Task::Fewshot, Task::Grounding];

    pub fn name(self) -> &'static str {
        match self {
            Task::Tal => "tal",
            Task::Fewshot => "fewshot",
            Task::Grounding => "grounding",
        }
    }
}

/// Metric columns of the ablation table; tasks leave unrelated ones empty.
pub const METRIC_COLUMNS: [&str; 9] = [
    "mAP@0.5",
    "mAP@0.75",
    "mAP@0.95",
    "AmAP",
    "recall@0.5",
    "recall@0.7",
    "mIoU",
    "random_recall@0.5",
    "median_fg2bg_minus_fg2fg",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub variant: Objective,
    pub task: Task,
    pub seed: u64,
    /// Values in [`METRIC_COLUMNS`] order, or the failure message.
    pub outcome: std::result::Result<[Option<f64>; 9], String>,
}

impl CellResult {
    pub fn metric(&self, name: &str) -> Option<f64> {
        let k = METRIC_COLUMNS.iter().position(|c| *c == name)?;
        self.outcome.as_ref().ok()?[k]
    }
}

fn tal_metrics(tal: &TalOutcome, analysis: &DistanceReport) -> [Option<f64>; 9] {
    let r = &tal.report;
    [
        Some(r.map_050),
        Some(r.map_075),
        Some(r.map_095),
        Some(r.amap),
        None,
        None,
        None,
        None,
        Some(analysis.median_difference),
    ]
}

fn fewshot_metrics(f: &FewshotReport) -> [Option<f64>; 9] {
    let m = &f.mean;
    [Some(m.map_050), Some(m.map_075), Some(m.map_095), Some(m.amap), None, None, None, None, None]
}

fn grounding_metrics(g: &GroundingRun) -> [Option<f64>; 9] {
    [
        None,
        None,
        None,
        None,
        g.report.recall_at(0.5),
        g.report.recall_at(0.7),
        Some(g.report.miou),
        g.random_baseline.recall_at(0.5),
        None,
    ]
}

fn failure(e: Error) -> String {
    e.to_string()
}

/// TAL, feature analysis and grounding share one backbone trained on the
/// training split; few-shot uses a second one trained on base classes only.
pub fn run_cells(
    data: &Dataset,
    cfg: &RunConfig,
    variant: Objective,
    seed: u64,
    exec: Execution,
) -> Vec<CellResult> {
    let cell = |task, outcome| CellResult {
        variant,
        task,
        seed,
        outcome,
    };
    let train_cfg = cfg.train_config(variant, seed);
    let fewshot = train(&data.base_pretrain_corpus(), &data.class_names, &train_cfg, None)
        .and_then(|t| {
            let f = feature_table(&t.model, &data.corpus, exec)?;
            run_fewshot(data, &f, &t.meta, cfg, seed, exec)
        })
        .map(|f| fewshot_metrics(&f))
        .map_err(failure);
    let full = train(&data.pretrain_corpus(), &data.class_names, &train_cfg, None)
        .and_then(|t| Ok((feature_table(&t.model, &data.corpus, exec)?, t.model)));
    let (tal, grounding) = match &full {
        Ok((features, model)) => (
            run_tal(data, features, cfg, exec)
                .and_then(|t| Ok(tal_metrics(&t, &run_analysis(data, features, seed, exec)?)))
                .map_err(failure),
            run_grounding(data, model, variant, features, cfg, seed, exec)
                .map(|g| grounding_metrics(&g))
                .map_err(failure),
        ),
        Err(e) => (Err(e.to_string()), Err(e.to_string())),
    };
    vec![
        cell(Task::Tal, tal),
        cell(Task::Fewshot, fewshot),
        cell(Task::Grounding, grounding),
    ]
}

/// Runs every (variant, seed) pair of `cfg` and returns cells ordered by
/// variant, task, seed. The order and values do not depend on `exec`.
pub fn run_ablation(data: &Dataset, cfg: &RunConfig, exec: Execution) -> Result<Vec<CellResult>> {
    cfg.validate()?;
    let jobs: Vec<(Objective, u64)> = cfg
        .variants
        .iter()
        .flat_map(|&v| cfg.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let mut cells: Vec<CellResult> = exec
        .map(&jobs, |&(v, s)| run_cells(data, cfg, v, s, exec))
        .into_iter()
        .flatten()
        .collect();
    let rank = |o: Objective| cfg.variants.iter().position(|&v| v == o).unwrap_or(usize::MAX);
    cells.sort_by_key(|c| (rank(c.variant), c.task, cfg.seeds.iter().position(|&s| s == c.seed)));
    Ok(cells)
}

/// Mean and sample standard deviation of one metric over the successful
/// cells of a (variant, task) group.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub variant: Objective,
    pub task: Task,
    pub n_ok: usize,
    pub mean: [Option<f64>; 9],
    pub std: [Option<f64>; 9],
}

pub fn aggregate(cells: &[CellResult]) -> Vec<Aggregate> {
    let mut groups: Vec<(Objective, Task)> = Vec::new();
    for c in cells {
        if !groups.contains(&(c.variant, c.task)) {
            groups.push((c.variant, c.task));
        }
    }
    groups
        .into_iter()
        .map(|(variant, task)| {
            let ok: Vec<&[Option<f64>; 9]> = cells
                .iter()
                .filter(|c| c.variant == variant && c.task == task)
                .filter_map(|c| c.outcome.as_ref().ok())
                .collect();
            let mut mean = [None; 9];
            let mut std = [None; 9];
            for k in 0..9 {
                let vals: Vec<f64> = ok.iter().filter_map(|m| m[k]).collect();
                if vals.is_empty() {
                    continue;
                }
                let n = vals.len() as f64;
                let mu = vals.iter().sum::<f64>() / n;
                mean[k] = Some(mu);
                std[k] = Some(if vals.len() > 1 {
                    (vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
                } else {
                    0.0
                });
            }
            Aggregate {
                variant,
                task,
                n_ok: ok.len(),
                mean,
                std,
            }
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per cell followed by `mean` and `std` rows per (variant, task).
pub fn write_ablation_csv(cells: &[CellResult], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e: csv::Error| Error::Data(format!("writing {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut header = vec!["variant", "task", "seed", "status"];
    header.extend(METRIC_COLUMNS);
    w.write_record(&header).map_err(io)?;
    for c in cells {
        let mut row = vec![c.variant.name().to_string(), c.task.name().to_string(), c.seed.to_string()];
        match &c.outcome {
            Ok(m) => {
                row.push("ok".into());
                row.extend(m.iter().map(|v| fmt_opt(*v)));
            }
            Err(msg) => {
                row.push(format!("error: {msg}"));
                row.extend(std::iter::repeat_n(String::new(), METRIC_COLUMNS.len()));
            }
        }
        w.write_record(&row).map_err(io)?;
    }
    for a in aggregate(cells) {
        for (label, vals) in [("mean", &a.mean), ("std", &a.std)] {
            let mut row = vec![
                a.variant.name().to_string(),
                a.task.name().to_string(),
                label.to_string(),
                format!("ok={}", a.n_ok),
            ];
            row.extend(vals.iter().map(|v| fmt_opt(*v)));
            w.write_record(&row).map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ok_cell(seed: u64, amap: f64) -> CellResult {
        let mut m = [None; 9];
        m[3] = Some(amap);
        CellResult {
            variant: Objective::Clap,
            task: Task::Tal,
            seed,
            outcome: Ok(m),
        }
    }

    #[test]
    fn aggregate_skips_failures() {
        let mut cells = vec![ok_cell(0, 0.2), ok_cell(1, 0.4)];
        cells.push(CellResult {
            outcome: Err("boom".into()),
            ..ok_cell(2, 0.0)
        });
        let a = aggregate(&cells);
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].n_ok, 2);
        assert!((a[0].mean[3].unwrap() - 0.3).abs() < 1e-15);
        assert!((a[0].std[3].unwrap() - 0.02f64.sqrt()).abs() < 1e-15);
        assert_eq!(a[0].mean[0], None);
    }

    #[test]
    fn mismatched_dims_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.generator.d_raw = 16;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(RunConfig::default().validate().is_ok());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_json(r#"{"bogus": 1}"#, Path::new("x.json"));
        assert!(matches!(err, Err(Error::Parse { .. })));
    }
}
