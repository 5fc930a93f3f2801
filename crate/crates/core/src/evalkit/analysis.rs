use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::FeatureTable;
use crate::corpus::UntrimmedVideo;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::numkit::l2_distance;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoDistance {
    pub video_id: String,
    pub fg2fg: f64,
    pub fg2bg: f64,
    /// `fg2bg − fg2fg`; positive when backgrounds sit further away.
    pub difference: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub videos: Vec<VideoDistance>,
    /// Videos without two foreground seconds and one background second.
    pub skipped: usize,
    pub median_difference: f64,
}

fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per video: two random foreground seconds and one background second,
/// compared by L2 distance. Each video uses its own random stream.
pub fn feature_distance_analysis(
    videos: &[&UntrimmedVideo],
    features: &FeatureTable,
    seed: u64,
    exec: Execution,
) -> Result<DistanceReport> {
    let indices: Vec<usize> = (0..videos.len()).collect();
    let rows = exec.map(&indices, |&i| -> Result<Option<VideoDistance>> {
        let v = videos[i];
        let f = features.get(&v.id)?;
        let labels = v.second_labels();
        let fg: Vec<usize> = (0..labels.len()).filter(|&t| labels[t].class_id().is_some()).collect();
        let bg: Vec<usize> = (0..labels.len()).filter(|&t| labels[t].class_id().is_none()).collect();
        if fg.len() < 2 || bg.is_empty() {
            return Ok(None);
        }
        if f.len() != labels.len() {
            return Err(Error::Data(format!("video {} has mismatched feature rows", v.id)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let pair = sample(&mut rng, fg.len(), 2);
        let b = bg[rng.random_range(0..bg.len())];
        let h1 = &f[fg[pair.index(0)]];
        let h2 = &f[fg[pair.index(1)]];
        let fg2fg = l2_distance(h1, h2);
        let fg2bg = l2_distance(h1, &f[b]);
        Ok(Some(VideoDistance {
            video_id: v.id.clone(),
            fg2fg,
            fg2bg,
            difference: fg2bg - fg2fg,
        }))
    });
    let mut out = Vec::new();
    let mut skipped = 0;
    for r in rows {
        match r? {
            Some(d) => out.push(d),
            None => skipped += 1,
        }
    }
    let diffs: Vec<f64> = out.iter().map(|d| d.difference).collect();
    Ok(DistanceReport {
        median_difference: median(&diffs),
        videos: out,
        skipped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub left: f64,
    pub right: f64,
    pub count: usize,
}

/// Equal-width bins spanning the data range; the last bin is closed.
pub fn histogram(values: &[f64], bins: usize) -> Result<Vec<HistogramBin>> {
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    if values.is_empty() {
        return Ok(Vec::new());
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        hi = lo + 1.0;
    }
    let width = (hi - lo) / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            left: lo + i as f64 * width,
            right: if i + 1 == bins { hi } else { lo + (i + 1) as f64 * width },
            count: 0,
        })
        .collect();
    for v in values {
        let k = (((v - lo) / width) as usize).min(bins - 1);
        out[k].count += 1;
    }
    Ok(out)
}

pub fn write_histogram_csv(bins: &[HistogramBin], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::from("bin_left,bin_right,count\n");
    for b in bins {
        writeln!(s, "{},{},{}", b.left, b.right, b.count).expect("writing to a string");
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
