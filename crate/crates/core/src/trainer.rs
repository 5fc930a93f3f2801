//! Post-pre-training loop and feature extraction.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{sample_clips, ClassId, ClipSample, SampleMode, UntrimmedVideo, CLIPS_PER_SEGMENT};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::language::{describe_clip, fnv1a64, PromptPolicy, TextDescription};
use crate::losses::{
    total_loss, ClipLabel, ContrastiveBatch, ContrastiveOptions, EmbeddingPair, LossBatch,
    LossReport, Objective,
};
use crate::model::{save_checkpoint, CheckpointMeta, ModelConfig, ModelState};
use crate::numkit::{sgd_step, DenseMatrix, ParamGroup, SgdConfig};
use crate::provenance::{config_hash, CODE_VERSION};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub epochs: usize,
    /// Pairs per batch.
    pub batch_size: usize,
    pub clips_per_segment: usize,
    /// Steps per epoch; derived from the corpus size when absent.
    pub steps_per_epoch: Option<usize>,
    /// Probability of pairing a clip with its caption where the objective
    /// mixes captions and prompts.
    pub caption_probability: f64,
    pub dedupe_negatives: bool,
    pub sgd: SgdConfig,
    pub model: ModelConfig,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many epochs (0: final only).
    pub checkpoint_every_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Clap,
            epochs: 8,
            batch_size: 32,
            clips_per_segment: CLIPS_PER_SEGMENT,
            steps_per_epoch: None,
            caption_probability: 0.5,
            dedupe_negatives: false,
            sgd: SgdConfig::default(),
            model: ModelConfig::default(),
            seed: 0,
            checkpoint_every_epochs: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        let min_batch = if self.objective.contrastive().is_some() { 2 } else { 1 };
        if self.batch_size < min_batch {
            return Err(Error::Config(format!(
                "batch_size must be at least {min_batch} for objective {}",
                self.objective
            )));
        }
        if self.clips_per_segment == 0 {
            return Err(Error::Config("clips_per_segment must be at least 1".into()));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Config("steps_per_epoch must be at least 1".into()));
        }
        self.policy().validate()?;
        self.sgd.validate()?;
        self.model.validate()
    }

    pub fn policy(&self) -> PromptPolicy {
        PromptPolicy {
            caption_probability: self.caption_probability,
            variant: self.objective.prompt_variant(),
        }
    }

    fn contrastive_options(&self) -> ContrastiveOptions {
        ContrastiveOptions {
            dedupe_negatives: self.dedupe_negatives,
        }
    }
}

/// Clips, descriptions and labels of one training step.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub clips: Vec<ClipSample>,
    pub descriptions: Vec<TextDescription>,
    pub labels: Vec<ClipLabel>,
}

impl TrainBatch {
    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|l| l.foreground).count()
    }
}

/// The two random streams a run consumes: clip sampling and description
/// choice. Keeping them apart means every objective sees the same clips for
/// a given seed.
pub struct BatchRng {
    clips: ChaCha8Rng,
    texts: ChaCha8Rng,
}

impl BatchRng {
    pub fn new(seed: u64) -> Self {
        let mut clips = ChaCha8Rng::seed_from_u64(seed);
        clips.set_stream(1);
        let mut texts = ChaCha8Rng::seed_from_u64(seed);
        texts.set_stream(2);
        Self { clips, texts }
    }
}

/// Draws `batch_size` clips (video uniformly, then one of its segments
/// uniformly) and describes each under the objective's prompt policy.
pub fn build_batch(
    corpus: &[UntrimmedVideo],
    class_names: &[String],
    cfg: &TrainConfig,
    rng: &mut BatchRng,
) -> Result<TrainBatch> {
    if corpus.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    let policy = cfg.policy();
    let mut batch = TrainBatch {
        clips: Vec::with_capacity(cfg.batch_size),
        descriptions: Vec::with_capacity(cfg.batch_size),
        labels: Vec::with_capacity(cfg.batch_size),
    };
    while batch.clips.len() < cfg.batch_size {
        let video = &corpus[rng.clips.random_range(0..corpus.len())];
        let mut candidates = sample_clips(video, 1, SampleMode::Train, &mut rng.clips)?;
        if candidates.is_empty() {
            continue;
        }
        let clip = candidates.swap_remove(rng.clips.random_range(0..candidates.len()));
        let desc = describe_clip(&clip, video, &policy, class_names, &mut rng.texts)?;
        batch.labels.push(ClipLabel {
            foreground: clip.is_foreground,
            class_id: clip.class_id,
        });
        batch.clips.push(clip);
        batch.descriptions.push(desc);
    }
    Ok(batch)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr_backbone: f64,
    pub lr_heads: f64,
    pub n_foreground: usize,
    #[serde(flatten)]
    pub loss: LossReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
    pub wall_clock_s: f64,
}

impl TrainLog {
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for s in &self.steps {
            let line = serde_json::to_string(s).expect("step record serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub struct TrainOutcome {
    pub model: ModelState,
    pub log: TrainLog,
    pub meta: CheckpointMeta,
}

/// Number of steps in one epoch when not configured explicitly: enough draws
/// to visit every segment `clips_per_segment` times on average.
pub fn default_steps_per_epoch(corpus: &[UntrimmedVideo], cfg: &TrainConfig) -> usize {
    let segments: usize = corpus.iter().map(|v| v.segments.len()).sum();
    (segments * cfg.clips_per_segment).div_ceil(cfg.batch_size).max(1)
}

fn step_inputs(
    model: &ModelState,
    batch: &TrainBatch,
    with_text: bool,
) -> Result<(DenseMatrix, Option<DenseMatrix>)> {
    let raw: Vec<Vec<f64>> = batch.clips.iter().map(|c| c.raw_feature.clone()).collect();
    let raw = DenseMatrix::from_rows(&raw)?;
    let text = if with_text {
        Some(model.encode_texts(&batch.descriptions)?)
    } else {
        None
    };
    Ok((raw, text))
}

fn diagnostic(batch: &TrainBatch, report: &LossReport, step: usize, epoch: usize) -> String {
    let clips: Vec<String> = batch
        .clips
        .iter()
        .zip(&batch.descriptions)
        .map(|(c, d)| format!("{}@{}s fg={} text={:?}", c.video_id, c.t_start, c.is_foreground, d.text))
        .collect();
    format!(
        "non-finite loss at step {step} (epoch {epoch}): {report:?}; batch: [{}]",
        clips.join("; ")
    )
}

/// Runs post-pre-training. When `out_dir` is given, the step log, periodic
/// checkpoints and the final checkpoint are written there.
pub fn train(
    corpus: &[UntrimmedVideo],
    class_names: &[String],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Some(bad) = corpus.iter().find(|v| v.feature_dim() != cfg.model.d_raw) {
        return Err(Error::Config(format!(
            "video {} has {}-dimensional features, model expects {}",
            bad.id,
            bad.feature_dim(),
            cfg.model.d_raw
        )));
    }
    if cfg.objective.contrastive().is_some()
        && !corpus.iter().any(|v| v.foreground_segments().next().is_some())
    {
        return Err(Error::Config(
            "contrastive objectives need at least one foreground segment".into(),
        ));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let started = Instant::now();
    let mut model_cfg = cfg.model.clone();
    model_cfg.seed = cfg.seed;
    let mut model = ModelState::new(&model_cfg)?;
    model.set_training(true);
    let mut rng = BatchRng::new(cfg.seed);
    let steps_per_epoch = cfg
        .steps_per_epoch
        .unwrap_or_else(|| default_steps_per_epoch(corpus, cfg));
    let with_text = cfg.objective.contrastive().is_some();
    let tau = model.temperature();
    let seen: BTreeSet<ClassId> = corpus
        .iter()
        .flat_map(|v| v.foreground_segments().filter_map(|s| s.class_id))
        .collect();
    let mut meta = CheckpointMeta {
        seed: cfg.seed,
        config_hash: config_hash(cfg),
        code_version: CODE_VERSION.to_string(),
        objective: Some(cfg.objective.name().to_string()),
        seen_classes: Some(seen.into_iter().collect()),
        epochs_completed: 0,
    };

    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut epoch_losses = Vec::with_capacity(steps_per_epoch);
        for _ in 0..steps_per_epoch {
            let batch = build_batch(corpus, class_names, cfg, &mut rng)?;
            let (raw, text) = step_inputs(&model, &batch, with_text)?;
            let fwd = model.forward_batch(&raw, text.as_ref())?;
            let embeddings = match (fwd.z_v(), fwd.z_t()) {
                (Some(zv), Some(zt)) => Some(ContrastiveBatch::new(
                    (0..batch.clips.len())
                        .map(|i| EmbeddingPair {
                            z_v: zv.row(i).to_vec(),
                            z_t: zt.row(i).to_vec(),
                            is_foreground: batch.labels[i].foreground,
                            class_id: batch.labels[i].class_id,
                            text_key: Some(fnv1a64(batch.descriptions[i].text.as_bytes())),
                        })
                        .collect(),
                )),
                _ => None,
            };
            let loss_batch = LossBatch {
                embeddings,
                class_logits: fwd.class_logits.clone(),
                region_logits: fwd.region_logits.clone(),
                labels: batch.labels.clone(),
            };
            let (report, loss_grads) =
                total_loss(&loss_batch, cfg.objective, tau, cfg.contrastive_options())?;
            if !report.is_finite() {
                return Err(Error::Numeric(diagnostic(&batch, &report, step, epoch)));
            }
            let grads = model.backward_batch(&fwd, &loss_grads)?;
            model.commit_running_stats(&fwd)?;
            sgd_step(&mut model, &grads, epoch, &cfg.sgd).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!(
                    "{m}; {}",
                    diagnostic(&batch, &report, step, epoch)
                )),
                other => other,
            })?;
            epoch_losses.push(report.l_total);
            log.steps.push(StepRecord {
                step,
                epoch,
                lr_backbone: cfg.sgd.lr(epoch, ParamGroup::Backbone),
                lr_heads: cfg.sgd.lr(epoch, ParamGroup::Heads),
                n_foreground: batch.foreground_count(),
                loss: report,
            });
            step += 1;
        }
        log.epochs.push(EpochSummary {
            epoch,
            steps: epoch_losses.len(),
            mean_loss: epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64,
        });
        meta.epochs_completed = epoch + 1;
        if let Some(dir) = out_dir {
            let every = cfg.checkpoint_every_epochs;
            if every > 0 && (epoch + 1) % every == 0 && epoch + 1 < cfg.epochs {
                let mut snapshot = model.clone();
                snapshot.set_training(false);
                save_checkpoint(&snapshot, &meta, dir.join(format!("checkpoint_epoch{}.json", epoch + 1)))?;
            }
        }
    }
    model.set_training(false);
    log.wall_clock_s = started.elapsed().as_secs_f64();
    if let Some(dir) = out_dir {
        save_checkpoint(&model, &meta, dir.join("checkpoint.json"))?;
        log.write_jsonl(dir.join("train_log.jsonl"))?;
    }
    Ok(TrainOutcome { model, log, meta })
}

/// Per-second encoder features of one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoFeatures {
    pub video_id: String,
    pub features: Vec<Vec<f64>>,
}

/// Encoder output `h_v` for every second of every video. The model is only
/// read.
pub fn extract_features(
    model: &ModelState,
    corpus: &[UntrimmedVideo],
    exec: Execution,
) -> Result<Vec<VideoFeatures>> {
    exec.map(corpus, |video| {
        if video.feature_dim() != model.config.d_raw {
            return Err(Error::Config(format!(
                "video {} has {}-dimensional features, model expects {}",
                video.id,
                video.feature_dim(),
                model.config.d_raw
            )));
        }
        let raw = DenseMatrix::from_rows(&video.clip_features)?;
        let h = model.features(&raw)?;
        Ok(VideoFeatures {
            video_id: video.id.clone(),
            features: h.to_rows(),
        })
    })
    .into_iter()
    .collect()
}

pub fn save_features(features: &[VideoFeatures], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for f in features {
        let line = serde_json::to_string(f).expect("features serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_features(path: impl AsRef<Path>) -> Result<Vec<VideoFeatures>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{class_names, generate_corpus, GeneratorConfig};
    use crate::language::TextOrigin;
    use crate::numkit::Parameters;

    fn tiny_corpus(n: usize) -> Vec<UntrimmedVideo> {
        generate_corpus(&GeneratorConfig {
            n_videos: n,
            ..Default::default()
        })
        .unwrap()
    }

    fn quick(objective: Objective) -> TrainConfig {
        TrainConfig {
            objective,
            epochs: 2,
            batch_size: 8,
            steps_per_epoch: Some(4),
            ..Default::default()
        }
    }

    #[test]
    fn labels_and_prompt_only_policy() {
        let corpus = tiny_corpus(6);
        let names = class_names(10);
        let cfg = quick(Objective::ClapMask);
        let mut rng = BatchRng::new(3);
        for _ in 0..10 {
            let b = build_batch(&corpus, &names, &cfg, &mut rng).unwrap();
            assert_eq!(b.clips.len(), 8);
            assert!(b.descriptions.iter().all(|d| d.origin == TextOrigin::Synthetic));
            assert!(b.labels.iter().all(|l| l.foreground == l.class_id.is_some()));
        }
    }

    #[test]
    fn clip_draws_do_not_depend_on_objective() {
        let corpus = tiny_corpus(6);
        let names = class_names(10);
        let a = build_batch(&corpus, &names, &quick(Objective::Clap), &mut BatchRng::new(5)).unwrap();
        let b = build_batch(&corpus, &names, &quick(Objective::Tac), &mut BatchRng::new(5)).unwrap();
        assert_eq!(a.clips, b.clips);
    }

    #[test]
    fn tac_leaves_text_projection_untouched() {
        let corpus = tiny_corpus(10);
        let cfg = quick(Objective::Tac);
        let init = ModelState::new(&ModelConfig {
            seed: cfg.seed,
            ..cfg.model.clone()
        })
        .unwrap();
        let out = train(&corpus, &class_names(10), &cfg, None).unwrap();
        assert_eq!(out.model.proj_text.to_flat(), init.proj_text.to_flat());
        assert_ne!(out.model.backbone_checksum(), init.backbone_checksum());
        assert!(out.log.steps.iter().all(|s| s.loss.l_total.is_finite()));
    }

    #[test]
    fn rejects_bad_configs() {
        let corpus = tiny_corpus(2);
        let mut cfg = quick(Objective::Clap);
        cfg.batch_size = 1;
        assert!(matches!(train(&corpus, &class_names(10), &cfg, None), Err(Error::Config(_))));
        let mut cfg = quick(Objective::Clap);
        cfg.model.d_raw = 5;
        assert!(matches!(train(&corpus, &class_names(10), &cfg, None), Err(Error::Config(_))));
    }
}
