use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{ground_truth, map_suite, AmapGrid, MapReport};
use super::probe::{FeatureScaler, SecondScores};
use super::tal::{localize, WindowConfig};
use super::FeatureTable;
use crate::corpus::{ClassId, UntrimmedVideo};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::numkit::{cosine, DenseMatrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeSpec {
    pub base_classes: Vec<ClassId>,
    pub val_classes: Vec<ClassId>,
    pub test_classes: Vec<ClassId>,
    /// Support videos per novel class.
    pub shots: usize,
    pub episodes: usize,
    pub seed: u64,
    /// Softmax temperature over prototype cosines.
    pub prototype_temperature: f64,
    pub windows: WindowConfig,
    pub amap_grid: AmapGrid,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            base_classes: Vec::new(),
            val_classes: Vec::new(),
            test_classes: Vec::new(),
            shots: 5,
            episodes: 20,
            seed: 0,
            prototype_temperature: 0.1,
            windows: WindowConfig::default(),
            amap_grid: AmapGrid::default(),
        }
    }
}

impl EpisodeSpec {
    /// Novel classes evaluated in every episode.
    pub fn novel_classes(&self) -> Vec<ClassId> {
        let set: BTreeSet<ClassId> = self.val_classes.iter().chain(&self.test_classes).copied().collect();
        set.into_iter().collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for c in self.base_classes.iter().chain(&self.val_classes).chain(&self.test_classes) {
            if !seen.insert(*c) {
                return Err(Error::Episode(format!("class {c} appears in more than one partition")));
            }
        }
        if self.novel_classes().is_empty() {
            return Err(Error::Episode("no novel classes to evaluate".into()));
        }
        if self.shots == 0 || self.episodes == 0 {
            return Err(Error::Config("shots and episodes must be positive".into()));
        }
        if !(self.prototype_temperature > 0.0) {
            return Err(Error::Config("prototype_temperature must be positive".into()));
        }
        self.windows.validate()
    }
}

/// Fails when any novel class was visible while the features were trained.
pub fn check_no_leakage(seen_classes: Option<&[ClassId]>, novel: &[ClassId]) -> Result<()> {
    let seen = seen_classes.ok_or_else(|| {
        Error::Episode("checkpoint does not record which classes it was trained on".into())
    })?;
    if let Some(c) = novel.iter().find(|c| seen.contains(c)) {
        return Err(Error::Episode(format!("novel class {c} was seen during post-pre-training")));
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    #[serde(rename = "mAP@0.5")]
    pub map_050: f64,
    #[serde(rename = "mAP@0.75")]
    pub map_075: f64,
    #[serde(rename = "mAP@0.95")]
    pub map_095: f64,
    #[serde(rename = "AmAP")]
    pub amap: f64,
}

impl MapSummary {
    fn of(r: &MapReport) -> Self {
        Self {
            map_050: r.map_050,
            map_075: r.map_075,
            map_095: r.map_095,
            amap: r.amap,
        }
    }

    fn as_array(&self) -> [f64; 4] {
        [self.map_050, self.map_075, self.map_095, self.amap]
    }

    fn from_array(a: [f64; 4]) -> Self {
        Self {
            map_050: a[0],
            map_075: a[1],
            map_095: a[2],
            amap: a[3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewshotReport {
    pub novel_classes: Vec<ClassId>,
    pub shots: usize,
    pub episodes: Vec<MapSummary>,
    pub mean: MapSummary,
    /// Sample standard deviation over episodes.
    pub std: MapSummary,
}

fn mean_of(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; rows[0].len()];
    for r in rows {
        for (a, v) in m.iter_mut().zip(r) {
            *a += v;
        }
    }
    m.iter_mut().for_each(|a| *a /= rows.len() as f64);
    m
}

fn run_episode(
    episode: usize,
    spec: &EpisodeSpec,
    novel: &[ClassId],
    by_class: &[Vec<&UntrimmedVideo>],
    features: &FeatureTable,
) -> Result<MapReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(episode as u64);
    let mut supports: Vec<Vec<&UntrimmedVideo>> = Vec::with_capacity(novel.len());
    let mut queries: Vec<&UntrimmedVideo> = Vec::new();
    for (c, pool) in novel.iter().zip(by_class) {
        if pool.len() < spec.shots {
            return Err(Error::Episode(format!(
                "class {c} has {} videos, {} shots requested",
                pool.len(),
                spec.shots
            )));
        }
        let picked: BTreeSet<usize> = sample(&mut rng, pool.len(), spec.shots).into_iter().collect();
        supports.push(picked.iter().map(|&i| pool[i]).collect());
        queries.extend(pool.iter().enumerate().filter(|(i, _)| !picked.contains(i)).map(|(_, v)| *v));
    }
    queries.sort_by(|a, b| a.id.cmp(&b.id));

    let mut all_rows = Vec::new();
    for v in supports.iter().flatten() {
        all_rows.extend(features.get(&v.id)?.iter().cloned());
    }
    let scaler = FeatureScaler::fit(&DenseMatrix::from_rows(&all_rows)?);

    let mut bg_rows = Vec::new();
    let mut prototypes = Vec::with_capacity(novel.len());
    for (c, vids) in novel.iter().zip(&supports) {
        let mut fg_rows = Vec::new();
        for v in vids {
            let f = features.get(&v.id)?;
            for (t, row) in f.iter().enumerate() {
                let x = scaler.apply_row(row);
                match v.label_at(t).class_id() {
                    Some(k) if k == *c => fg_rows.push(x),
                    Some(_) => {}
                    None => bg_rows.push(x),
                }
            }
        }
        if fg_rows.is_empty() {
            return Err(Error::Episode(format!("support videos of class {c} have no foreground")));
        }
        prototypes.push(mean_of(&fg_rows));
    }
    if bg_rows.is_empty() {
        return Err(Error::Episode("support videos have no background".into()));
    }
    let bg_proto = mean_of(&bg_rows);

    let temp = spec.prototype_temperature;
    let mut dets = Vec::new();
    for q in &queries {
        let f = features.get(&q.id)?;
        let mut scores = SecondScores {
            p_fg: Vec::with_capacity(f.len()),
            class_prob: Vec::with_capacity(f.len()),
        };
        for row in f {
            let x = scaler.apply_row(row);
            let bg_logit = cosine(&x, &bg_proto) / temp;
            let logits: Vec<f64> = prototypes.iter().map(|p| cosine(&x, p) / temp).collect();
            let m = logits.iter().copied().fold(bg_logit, f64::max);
            let bg_e = (bg_logit - m).exp();
            let cls_e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let fg_sum: f64 = cls_e.iter().sum();
            scores.p_fg.push(fg_sum / (fg_sum + bg_e));
            scores.class_prob.push(cls_e.iter().map(|e| e / fg_sum).collect());
        }
        for mut d in localize(&q.id, &scores, &spec.windows) {
            d.class_id = novel[d.class_id];
            dets.push(d);
        }
    }
    let gts = ground_truth(queries.iter().copied());
    Ok(map_suite(&dets, &gts, spec.amap_grid))
}

/// Runs `spec.episodes` prototype episodes over the novel classes.
///
/// `videos` is the pool supports and queries are drawn from; only videos
/// whose primary class is novel are used.
pub fn evaluate_fewshot(
    videos: &[&UntrimmedVideo],
    features: &FeatureTable,
    spec: &EpisodeSpec,
    exec: Execution,
) -> Result<FewshotReport> {
    spec.validate()?;
    let novel = spec.novel_classes();
    let by_class: Vec<Vec<&UntrimmedVideo>> = novel
        .iter()
        .map(|c| videos.iter().copied().filter(|v| v.primary_class == *c).collect())
        .collect();
    let reports = exec.map_range(spec.episodes, |e| run_episode(e, spec, &novel, &by_class, features));
    let episodes = reports
        .into_iter()
        .map(|r| r.map(|m| MapSummary::of(&m)))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<Vec<f64>> = episodes.iter().map(|e| e.as_array().to_vec()).collect();
    let mean = mean_of(&rows);
    let mut std = [0.0; 4];
    if rows.len() > 1 {
        for (k, s) in std.iter_mut().enumerate() {
            let ss: f64 = rows.iter().map(|r| (r[k] - mean[k]).powi(2)).sum();
            *s = (ss / (rows.len() - 1) as f64).sqrt();
        }
    }
    Ok(FewshotReport {
        novel_classes: novel,
        shots: spec.shots,
        episodes,
        mean: MapSummary::from_array([mean[0], mean[1], mean[2], mean[3]]),
        std: MapSummary::from_array(std),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partitions_must_be_disjoint() {
        let spec = EpisodeSpec {
            base_classes: vec![0, 1],
            val_classes: vec![1],
            test_classes: vec![2],
            ..Default::default()
        };
        assert!(matches!(spec.validate(), Err(Error::Episode(_))));
    }

    #[test]
    fn leakage_is_detected() {
        assert!(check_no_leakage(Some(&[0, 1]), &[2]).is_ok());
        assert!(matches!(check_no_leakage(Some(&[0, 2]), &[2]), Err(Error::Episode(_))));
        assert!(check_no_leakage(None, &[2]).is_err());
    }

    #[test]
    fn default_shots() {
        assert_eq!(EpisodeSpec::default().shots, 5);
    }
}
