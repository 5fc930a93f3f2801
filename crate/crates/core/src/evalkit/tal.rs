use serde::{Deserialize, Serialize};

use super::metrics::{ground_truth, map_suite, nms, AmapGrid, Detection, MapReport};
use super::probe::{labelled_seconds, LinearProbe, ProbeConfig, SecondScores};
use super::FeatureTable;
use crate::corpus::UntrimmedVideo;
use crate::error::{Error, Result};
use crate::exec::Execution;

/// How a window's evidence is aggregated over its seconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowScoring {
    /// Mean evidence inside the window.
    Mean,
    /// Summed per-second evidence above a baseline (one half for foreground
    /// probabilities, the video mean for query similarities): windows gain
    /// score while they cover more above-baseline seconds than not.
    #[default]
    Excess,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    /// Window lengths in seconds.
    pub scales: Vec<usize>,
    pub stride: usize,
    pub nms_threshold: f64,
    /// Detections kept per video after suppression.
    pub top_k: usize,
    pub scoring: WindowScoring,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            scales: vec![1, 2, 4, 8, 16],
            stride: 1,
            nms_threshold: 0.5,
            top_k: 100,
            scoring: WindowScoring::default(),
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.contains(&0) || self.stride == 0 {
            return Err(Error::Config("window scales and stride must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.nms_threshold) || self.top_k == 0 {
            return Err(Error::Config("nms_threshold must lie in [0, 1] and top_k be positive".into()));
        }
        Ok(())
    }

    /// `(start, length)` of every window fitting in `duration` seconds,
    /// longest scale first so that equal scores favour longer windows.
    pub fn windows(&self, duration: usize) -> Vec<(usize, usize)> {
        let mut scales = self.scales.clone();
        scales.sort_unstable_by(|a, b| b.cmp(a));
        scales.dedup();
        let mut out = Vec::new();
        for len in scales {
            if len > duration {
                continue;
            }
            let mut s = 0;
            while s + len <= duration {
                out.push((s, len));
                s += self.stride;
            }
        }
        out
    }
}

fn prefix_sums(values: &[f64]) -> Vec<f64> {
    let mut prefix = Vec::with_capacity(values.len() + 1);
    prefix.push(0.0);
    for v in values {
        prefix.push(prefix.last().copied().unwrap_or(0.0) + v);
    }
    prefix
}

/// Mean of `values[start..start+len]` for every window, via prefix sums.
fn window_means(values: &[f64], windows: &[(usize, usize)]) -> Vec<f64> {
    let prefix = prefix_sums(values);
    windows
        .iter()
        .map(|&(s, l)| (prefix[s + l] - prefix[s]) / l as f64)
        .collect()
}

/// Sum of `values − ½` over every window.
fn window_excess(values: &[f64], windows: &[(usize, usize)]) -> Vec<f64> {
    let prefix = prefix_sums(values);
    windows
        .iter()
        .map(|&(s, l)| prefix[s + l] - prefix[s] - 0.5 * l as f64)
        .collect()
}

/// Scores every window and class by mean foreground probability times mean
/// class probability, suppresses per class and keeps the `top_k` best.
pub fn localize(video_id: &str, scores: &SecondScores, cfg: &WindowConfig) -> Vec<Detection> {
    let duration = scores.p_fg.len();
    let windows = cfg.windows(duration);
    let fg = match cfg.scoring {
        WindowScoring::Mean => window_means(&scores.p_fg, &windows),
        WindowScoring::Excess => window_excess(&scores.p_fg, &windows),
    };
    let n_classes = scores.class_prob.first().map_or(0, Vec::len);
    let mut kept = Vec::new();
    for c in 0..n_classes {
        let pc: Vec<f64> = scores.class_prob.iter().map(|p| p[c]).collect();
        let cls = window_means(&pc, &windows);
        let dets: Vec<Detection> = windows
            .iter()
            .enumerate()
            .map(|(i, &(s, l))| Detection {
                video_id: video_id.to_string(),
                t_start: s as f64,
                t_end: (s + l) as f64,
                class_id: c,
                score: fg[i] * cls[i],
            })
            .collect();
        kept.extend(nms(&dets, cfg.nms_threshold));
    }
    kept.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.t_start.total_cmp(&b.t_start))
            .then(b.t_end.total_cmp(&a.t_end))
            .then(a.class_id.cmp(&b.class_id))
    });
    kept.truncate(cfg.top_k);
    kept
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TalConfig {
    pub windows: WindowConfig,
    pub probe: ProbeConfig,
    pub amap_grid: AmapGrid,
}

pub struct TalOutcome {
    pub report: MapReport,
    pub detections: Vec<Detection>,
}

/// Fits a probe on the training videos' features, localizes actions in the
/// evaluation videos and scores the detections.
pub fn evaluate_tal(
    train: &[&UntrimmedVideo],
    eval: &[&UntrimmedVideo],
    features: &FeatureTable,
    n_classes: usize,
    cfg: &TalConfig,
    exec: Execution,
) -> Result<TalOutcome> {
    cfg.windows.validate()?;
    let refs = train
        .iter()
        .map(|v| features.get(&v.id))
        .collect::<Result<Vec<_>>>()?;
    let (x, labels) = labelled_seconds(train, &refs)?;
    let probe = LinearProbe::fit(&x, &labels, n_classes, &cfg.probe)?;

    let per_video = exec.map(eval, |v| -> Result<Vec<Detection>> {
        let f = features.get(&v.id)?;
        Ok(localize(&v.id, &probe.score(f), &cfg.windows))
    });
    let mut detections = Vec::new();
    for d in per_video {
        detections.extend(d?);
    }
    let gts = ground_truth(eval.iter().copied());
    Ok(TalOutcome {
        report: map_suite(&detections, &gts, cfg.amap_grid),
        detections,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_scales() {
        assert_eq!(WindowConfig::default().scales, vec![1, 2, 4, 8, 16]);
    }

    #[test]
    fn window_enumeration() {
        let w = WindowConfig {
            scales: vec![1, 3],
            ..Default::default()
        };
        assert_eq!(w.windows(3), vec![(0, 3), (0, 1), (1, 1), (2, 1)]);
    }

    #[test]
    fn crisp_scores_recover_the_segment() {
        let mut p_fg = vec![0.0; 20];
        let mut class_prob = vec![vec![0.5, 0.5]; 20];
        for t in 4..12 {
            p_fg[t] = 1.0;
            class_prob[t] = vec![0.0, 1.0];
        }
        let dets = localize("v", &SecondScores { p_fg, class_prob }, &WindowConfig::default());
        assert_eq!((dets[0].t_start, dets[0].t_end, dets[0].class_id), (4.0, 12.0, 1));
    }
}
