use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::metrics::{tiou, TemporalInterval};
use super::probe::{FeatureScaler, ProbeConfig};
use super::tal::{WindowConfig, WindowScoring};
use super::FeatureTable;
use crate::corpus::UntrimmedVideo;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::language::TextEncoderTable;
use crate::model::ModelState;
use crate::numkit::{dot, normalized, Affine, DenseMatrix};

/// A text query with the interval it describes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub video_id: String,
    pub text: String,
    pub target: TemporalInterval,
}

/// Every caption of `videos` as a query for its own interval.
pub fn captions_as_queries(videos: &[&UntrimmedVideo]) -> Vec<Query> {
    videos
        .iter()
        .flat_map(|v| {
            v.captions.iter().map(|c| Query {
                video_id: v.id.clone(),
                text: c.text.clone(),
                target: TemporalInterval {
                    t_start: c.t_start,
                    t_end: c.t_end,
                },
            })
        })
        .collect()
}

/// Maps window features and query texts into one space compared by dot
/// product.
pub trait GroundingScorer: Sync {
    /// Unit-norm embeddings of window-averaged features (one window per row).
    fn embed_windows(&self, window_features: &DenseMatrix) -> Result<DenseMatrix>;

    /// Unit-norm embedding of query number `index`.
    fn embed_query(&self, index: usize, text: &str) -> Result<Vec<f64>>;
}

/// Uses the model's trained projections.
pub struct ProjectionScorer {
    model: ModelState,
}

impl ProjectionScorer {
    pub fn new(model: &ModelState) -> Self {
        let mut model = model.clone();
        model.set_training(false);
        Self { model }
    }
}

impl GroundingScorer for ProjectionScorer {
    fn embed_windows(&self, window_features: &DenseMatrix) -> Result<DenseMatrix> {
        self.model.project_video(window_features)
    }

    fn embed_query(&self, _index: usize, text: &str) -> Result<Vec<f64>> {
        let encoded = self.model.text_table.encode_str(text)?;
        let z = self.model.project_text(&DenseMatrix::from_vec(1, encoded.len(), encoded)?)?;
        Ok(z.row(0).to_vec())
    }
}

/// Replaces every query with a seeded random unit vector.
pub struct RandomQueryScorer {
    inner: ProjectionScorer,
    seed: u64,
}

impl RandomQueryScorer {
    pub fn new(model: &ModelState, seed: u64) -> Self {
        Self {
            inner: ProjectionScorer::new(model),
            seed,
        }
    }
}

impl GroundingScorer for RandomQueryScorer {
    fn embed_windows(&self, window_features: &DenseMatrix) -> Result<DenseMatrix> {
        self.inner.embed_windows(window_features)
    }

    fn embed_query(&self, index: usize, _text: &str) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let v: Vec<f64> = (0..self.inner.model.config.d_embed)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Ok(normalized(&v))
    }
}

/// A linear map from frozen text encodings into whitened feature space,
/// fitted by gradient descent on captioned training intervals. Lets a model
/// without trained projections be evaluated on grounding.
pub struct TextMapScorer {
    table: TextEncoderTable,
    text_scaler: FeatureScaler,
    feature_scaler: FeatureScaler,
    map: Affine,
}

impl TextMapScorer {
    pub fn fit(
        videos: &[&UntrimmedVideo],
        features: &FeatureTable,
        table: &TextEncoderTable,
        cfg: &ProbeConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut all_rows = Vec::new();
        for v in videos {
            all_rows.extend(features.get(&v.id)?.iter().cloned());
        }
        if all_rows.is_empty() {
            return Err(Error::Data("no features to fit a text map on".into()));
        }
        let feature_scaler = FeatureScaler::fit(&DenseMatrix::from_rows(&all_rows)?);
        let mut texts = Vec::new();
        let mut targets = Vec::new();
        for q in captions_as_queries(videos) {
            let f = features.get(&q.video_id)?;
            let mean = window_mean(f, q.target.t_start as usize, q.target.t_end as usize);
            texts.push(table.encode_str(&q.text)?);
            targets.push(normalized(&feature_scaler.apply_row(&mean)));
        }
        if texts.is_empty() {
            return Err(Error::Data("no captions to fit a text map on".into()));
        }
        let x = DenseMatrix::from_rows(&texts)?;
        let text_scaler = FeatureScaler::fit(&x);
        let xs = text_scaler.apply(&x)?;
        let y = DenseMatrix::from_rows(&targets)?;
        let n = xs.rows() as f64;
        let mut map = Affine::zeros(xs.cols(), y.cols());
        for _ in 0..cfg.steps {
            let mut residual = map.apply(&xs)?;
            for (r, t) in residual.data_mut().iter_mut().zip(y.data()) {
                *r = (*r - t) / n;
            }
            let gw = xs.t_matmul(&residual)?;
            let gb = residual.column_sums();
            for (w, g) in map.weight.data_mut().iter_mut().zip(gw.data()) {
                *w -= cfg.learning_rate * (g + cfg.weight_decay * *w);
            }
            for (b, g) in map.bias.iter_mut().zip(gb) {
                *b -= cfg.learning_rate * g;
            }
        }
        if !map.weight.is_finite() {
            return Err(Error::Numeric("text map diverged".into()));
        }
        Ok(Self {
            table: table.clone(),
            text_scaler,
            feature_scaler,
            map,
        })
    }
}

impl GroundingScorer for TextMapScorer {
    fn embed_windows(&self, window_features: &DenseMatrix) -> Result<DenseMatrix> {
        let rows: Vec<Vec<f64>> = window_features
            .row_iter()
            .map(|r| normalized(&self.feature_scaler.apply_row(r)))
            .collect();
        DenseMatrix::from_rows(&rows)
    }

    fn embed_query(&self, _index: usize, text: &str) -> Result<Vec<f64>> {
        let x = self.text_scaler.apply_row(&self.table.encode_str(text)?);
        Ok(normalized(&self.map.apply_vec(&x)))
    }
}

fn window_mean(features: &[Vec<f64>], start: usize, end: usize) -> Vec<f64> {
    let end = end.clamp(1, features.len());
    let start = start.min(end - 1);
    let mut m = vec![0.0; features[0].len()];
    for row in &features[start..end] {
        for (a, v) in m.iter_mut().zip(row) {
            *a += v;
        }
    }
    let n = (end - start) as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedInterval {
    pub t_start: f64,
    pub t_end: f64,
    pub score: f64,
}

/// Ranks windows of one video against a query embedding, best first, after
/// class-agnostic suppression.
///
/// With [`WindowScoring::Mean`] a window scores the similarity of its mean
/// feature; with [`WindowScoring::Excess`] it sums per-second similarities
/// minus their mean over the video.
pub fn ground_text(
    features: &[Vec<f64>],
    scorer: &dyn GroundingScorer,
    query: &[f64],
    windows: &WindowConfig,
) -> Result<Vec<RankedInterval>> {
    if features.is_empty() {
        return Ok(Vec::new());
    }
    let spans = windows.windows(features.len());
    let scores: Vec<f64> = match windows.scoring {
        WindowScoring::Mean => {
            let means: Vec<Vec<f64>> = spans.iter().map(|&(s, l)| window_mean(features, s, s + l)).collect();
            let z = scorer.embed_windows(&DenseMatrix::from_rows(&means)?)?;
            (0..spans.len()).map(|i| dot(z.row(i), query)).collect()
        }
        WindowScoring::Excess => {
            let z = scorer.embed_windows(&DenseMatrix::from_rows(features)?)?;
            let sims: Vec<f64> = (0..features.len()).map(|t| dot(z.row(t), query)).collect();
            let base = sims.iter().sum::<f64>() / sims.len() as f64;
            let mut prefix = vec![0.0];
            for v in &sims {
                prefix.push(prefix.last().copied().unwrap_or(0.0) + v - base);
            }
            spans.iter().map(|&(s, l)| prefix[s + l] - prefix[s]).collect()
        }
    };
    let mut order: Vec<(usize, f64)> = scores.into_iter().enumerate().collect();
    order.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then(spans[a.0].0.cmp(&spans[b.0].0))
            .then(a.0.cmp(&b.0))
    });
    let mut kept: Vec<RankedInterval> = Vec::new();
    for (i, score) in order {
        let (s, l) = spans[i];
        let cand = TemporalInterval {
            t_start: s as f64,
            t_end: (s + l) as f64,
        };
        let clash = kept.iter().any(|k| {
            let ki = TemporalInterval {
                t_start: k.t_start,
                t_end: k.t_end,
            };
            tiou(ki, cand) > windows.nms_threshold
        });
        if !clash {
            kept.push(RankedInterval {
                t_start: cand.t_start,
                t_end: cand.t_end,
                score,
            });
            if kept.len() == windows.top_k {
                break;
            }
        }
    }
    Ok(kept)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundingConfig {
    pub windows: WindowConfig,
    pub recall_thresholds: Vec<f64>,
    /// Settings of the text map fitted for models without trained projections.
    pub text_map: ProbeConfig,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        Self {
            windows: WindowConfig::default(),
            recall_thresholds: vec![0.5, 0.7],
            text_map: ProbeConfig {
                steps: 200,
                learning_rate: 0.5,
                weight_decay: 1e-4,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingReport {
    /// `(threshold, recall@1)` pairs.
    pub recall_at_1: Vec<(f64, f64)>,
    #[serde(rename = "mIoU")]
    pub miou: f64,
    pub n_queries: usize,
    /// Top-1 IoU of every query, in query order.
    pub top1_iou: Vec<f64>,
}

impl GroundingReport {
    pub fn recall_at(&self, threshold: f64) -> Option<f64> {
        self.recall_at_1.iter().find(|(t, _)| *t == threshold).map(|p| p.1)
    }
}

pub fn evaluate_grounding(
    queries: &[Query],
    features: &FeatureTable,
    scorer: &dyn GroundingScorer,
    cfg: &GroundingConfig,
    exec: Execution,
) -> Result<GroundingReport> {
    cfg.windows.validate()?;
    if queries.is_empty() {
        return Err(Error::Data("no grounding queries".into()));
    }
    let indices: Vec<usize> = (0..queries.len()).collect();
    let ious = exec.map(&indices, |&i| -> Result<f64> {
        let q = &queries[i];
        let z = scorer.embed_query(i, &q.text)?;
        let ranked = ground_text(features.get(&q.video_id)?, scorer, &z, &cfg.windows)?;
        Ok(ranked.first().map_or(0.0, |top| {
            tiou(
                TemporalInterval {
                    t_start: top.t_start,
                    t_end: top.t_end,
                },
                q.target,
            )
        }))
    });
    let top1_iou = ious.into_iter().collect::<Result<Vec<_>>>()?;
    let n = top1_iou.len() as f64;
    let recall_at_1 = cfg
        .recall_thresholds
        .iter()
        .map(|&t| (t, top1_iou.iter().filter(|&&v| v >= t).count() as f64 / n))
        .collect();
    Ok(GroundingReport {
        recall_at_1,
        miou: top1_iou.iter().sum::<f64>() / n,
        n_queries: top1_iou.len(),
        top1_iou,
    })
}
