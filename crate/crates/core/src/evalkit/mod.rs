//! Downstream evaluation: temporal metrics, sliding-window localization,
//! few-shot episodes, text grounding and feature-distance analysis.

mod analysis;
mod fewshot;
mod grounding;
mod metrics;
mod probe;
mod tal;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

pub use analysis::{
    feature_distance_analysis, histogram, write_histogram_csv, DistanceReport, HistogramBin,
    VideoDistance,
};
pub use fewshot::{check_no_leakage, evaluate_fewshot, EpisodeSpec, FewshotReport, MapSummary};
pub use grounding::{
    captions_as_queries, evaluate_grounding, ground_text, GroundingConfig, GroundingReport,
    GroundingScorer, ProjectionScorer, Query, RandomQueryScorer, RankedInterval, TextMapScorer,
};
pub use metrics::{
    average_precision, ground_truth, map_suite, mean_ap, nms, tiou, AmapGrid, ApResult, Detection,
    GroundTruth, MapReport, TemporalInterval,
};
pub use probe::{labelled_seconds, FeatureScaler, LinearProbe, ProbeConfig, SecondScores};
pub use tal::{evaluate_tal, localize, TalConfig, TalOutcome, WindowConfig, WindowScoring};

use crate::error::{Error, Result};
use crate::trainer::VideoFeatures;

/// Per-second features keyed by video id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureTable {
    map: BTreeMap<String, Vec<Vec<f64>>>,
}

impl FeatureTable {
    pub fn new(features: Vec<VideoFeatures>) -> Self {
        Self {
            map: features.into_iter().map(|f| (f.video_id, f.features)).collect(),
        }
    }

    pub fn get(&self, video_id: &str) -> Result<&[Vec<f64>]> {
        self.map
            .get(video_id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Data(format!("no features for video {video_id}")))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Writes one JSON object per detection.
pub fn save_detections(dets: &[Detection], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for d in dets {
        out.push_str(&serde_json::to_string(d).expect("detection serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Pretty-printed JSON report.
pub fn save_report<T: Serialize>(report: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}
