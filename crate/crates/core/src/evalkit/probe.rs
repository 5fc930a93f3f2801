use serde::{Deserialize, Serialize};

use crate::corpus::UntrimmedVideo;
use crate::error::{Error, Result};
use crate::losses::{classification_loss, ClipLabel};
use crate::numkit::{Affine, DenseMatrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Full-batch gradient steps.
    pub steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            learning_rate: 0.5,
            weight_decay: 1e-4,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "probe needs steps >= 1, positive learning rate, non-negative decay".into(),
            ));
        }
        Ok(())
    }
}

/// Column means and standard deviations used to whiten features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureScaler {
    pub fn fit(x: &DenseMatrix) -> Self {
        let mean = x.column_means();
        let n = x.rows().max(1) as f64;
        let mut var = vec![0.0; x.cols()];
        for row in x.row_iter() {
            for ((v, m), s) in row.iter().zip(&mean).zip(&mut var) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n).sqrt().max(1e-6)).collect();
        Self { mean, std }
    }

    pub fn apply_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn apply(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let rows: Vec<Vec<f64>> = x.row_iter().map(|r| self.apply_row(r)).collect();
        if rows.is_empty() {
            return Ok(DenseMatrix::zeros(0, x.cols()));
        }
        DenseMatrix::from_rows(&rows)
    }
}

/// Linear region and class classifiers on frozen features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub scaler: FeatureScaler,
    pub region: Affine,
    pub class: Affine,
}

/// Per-second probabilities produced by a probe.
#[derive(Clone, Debug, PartialEq)]
pub struct SecondScores {
    pub p_fg: Vec<f64>,
    /// `class_prob[t][c]`.
    pub class_prob: Vec<Vec<f64>>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn descend(layer: &mut Affine, x: &DenseMatrix, grad_out: &DenseMatrix, lr: f64, decay: f64) -> Result<()> {
    let gw = x.t_matmul(grad_out)?;
    let gb = grad_out.column_sums();
    for (w, g) in layer.weight.data_mut().iter_mut().zip(gw.data()) {
        *w -= lr * (g + decay * *w);
    }
    for (b, g) in layer.bias.iter_mut().zip(gb) {
        *b -= lr * g;
    }
    Ok(())
}

impl LinearProbe {
    /// Fits both classifiers by full-batch gradient descent from zero
    /// weights, so the result depends only on the data.
    pub fn fit(x: &DenseMatrix, labels: &[ClipLabel], n_classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        cfg.validate()?;
        if x.rows() == 0 || x.rows() != labels.len() {
            return Err(Error::Data(format!(
                "probe needs one label per feature row ({} rows, {} labels)",
                x.rows(),
                labels.len()
            )));
        }
        let scaler = FeatureScaler::fit(x);
        let xs = scaler.apply(x)?;
        let d = x.cols();
        let mut probe = Self {
            scaler,
            region: Affine::zeros(d, 2),
            class: Affine::zeros(d, n_classes),
        };
        for _ in 0..cfg.steps {
            let region_logits = probe.region.apply(&xs)?;
            let class_logits = probe.class.apply(&xs)?;
            let (loss, grads) = classification_loss(&class_logits, &region_logits, labels)?;
            if !loss.is_finite() {
                return Err(Error::Numeric("probe loss diverged".into()));
            }
            descend(&mut probe.region, &xs, &grads.region_logits, cfg.learning_rate, cfg.weight_decay)?;
            descend(&mut probe.class, &xs, &grads.class_logits, cfg.learning_rate, cfg.weight_decay)?;
        }
        Ok(probe)
    }

    pub fn n_classes(&self) -> usize {
        self.class.out_dim()
    }

    pub fn score(&self, features: &[Vec<f64>]) -> SecondScores {
        let mut out = SecondScores {
            p_fg: Vec::with_capacity(features.len()),
            class_prob: Vec::with_capacity(features.len()),
        };
        for row in features {
            let x = self.scaler.apply_row(row);
            out.p_fg.push(softmax(&self.region.apply_vec(&x))[1]);
            out.class_prob.push(softmax(&self.class.apply_vec(&x)));
        }
        out
    }
}

/// Stacks per-second features of `videos` with their labels.
pub fn labelled_seconds(
    videos: &[&UntrimmedVideo],
    features: &[&[Vec<f64>]],
) -> Result<(DenseMatrix, Vec<ClipLabel>)> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (video, feats) in videos.iter().zip(features) {
        if feats.len() != video.duration_s {
            return Err(Error::Data(format!(
                "video {} has {} feature rows for {} seconds",
                video.id,
                feats.len(),
                video.duration_s
            )));
        }
        for (t, row) in feats.iter().enumerate() {
            let class_id = video.label_at(t).class_id();
            rows.push(row.clone());
            labels.push(ClipLabel {
                foreground: class_id.is_some(),
                class_id,
            });
        }
    }
    if rows.is_empty() {
        return Err(Error::Data("no labelled seconds".into()));
    }
    Ok((DenseMatrix::from_rows(&rows)?, labels))
}
