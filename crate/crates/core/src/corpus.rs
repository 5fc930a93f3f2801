//! Synthetic untrimmed-video corpora.
//!
//! Each video is a timeline of one raw feature vector per second. Foreground
//! seconds are drawn around a per-class prototype, background seconds around
//! a shared background prototype shifted by a per-video offset. Some
//! foreground segments carry captions whose tokens lean on a class-specific
//! shard of the caption vocabulary.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exec::Execution;

pub type ClassId = usize;

/// Default number of clips sampled per contiguous segment.
pub const CLIPS_PER_SEGMENT: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SegmentLabel {
    Foreground(ClassId),
    Background,
}

impl SegmentLabel {
    pub fn class_id(self) -> Option<ClassId> {
        match self {
            SegmentLabel::Foreground(c) => Some(c),
            SegmentLabel::Background => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub t_start: f64,
    pub t_end: f64,
    /// `Some` for foreground segments.
    pub class_id: Option<ClassId>,
}

impl Segment {
    pub fn label(&self) -> SegmentLabel {
        match self.class_id {
            Some(c) => SegmentLabel::Foreground(c),
            None => SegmentLabel::Background,
        }
    }

    pub fn is_foreground(&self) -> bool {
        self.class_id.is_some()
    }

    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }

    pub fn contains(&self, t_start: f64, t_end: f64) -> bool {
        self.t_start <= t_start && t_end <= self.t_end
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimedCaption {
    pub t_start: f64,
    pub t_end: f64,
    pub text: String,
}

impl TimedCaption {
    pub fn center(&self) -> f64 {
        0.5 * (self.t_start + self.t_end)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UntrimmedVideo {
    pub id: String,
    pub duration_s: usize,
    pub primary_class: ClassId,
    /// One raw feature vector per second.
    pub clip_features: Vec<Vec<f64>>,
    pub segments: Vec<Segment>,
    pub captions: Vec<TimedCaption>,
}

impl UntrimmedVideo {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Data(format!("video {}: {msg}", self.id)));
        if self.duration_s == 0 {
            return bad("duration must be positive".into());
        }
        if self.clip_features.len() != self.duration_s {
            return bad(format!(
                "{} feature rows for a {} s video",
                self.clip_features.len(),
                self.duration_s
            ));
        }
        let d = self.clip_features[0].len();
        if self
            .clip_features
            .iter()
            .any(|f| f.len() != d || f.iter().any(|v| !v.is_finite()))
        {
            return bad("feature rows must share one dimension and be finite".into());
        }
        let dur = self.duration_s as f64;
        let mut sorted: Vec<&Segment> = self.segments.iter().collect();
        sorted.sort_by(|a, b| a.t_start.total_cmp(&b.t_start));
        for s in &sorted {
            if !(0.0 <= s.t_start && s.t_start < s.t_end && s.t_end <= dur) {
                return bad(format!("segment [{}, {}] out of range", s.t_start, s.t_end));
            }
        }
        if sorted.windows(2).any(|w| w[1].t_start < w[0].t_end) {
            return bad("segments overlap".into());
        }
        let fg: f64 = sorted
            .iter()
            .filter(|s| s.is_foreground())
            .map(|s| s.duration())
            .sum();
        if fg >= dur && sorted.iter().any(|s| !s.is_foreground()) {
            return bad("background segment in a fully covered video".into());
        }
        for c in &self.captions {
            if !(c.t_start < c.t_end) || c.text.split_whitespace().next().is_none() {
                return bad("captions need a positive span and non-empty text".into());
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.clip_features.first().map_or(0, Vec::len)
    }

    pub fn foreground_segments(&self) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(|s| s.is_foreground())
    }

    /// Label of the one-second clip starting at `second`.
    pub fn label_at(&self, second: usize) -> SegmentLabel {
        let t = second as f64;
        self.segments
            .iter()
            .find(|s| s.contains(t, t + 1.0))
            .map_or(SegmentLabel::Background, Segment::label)
    }

    /// Per-second labels over the whole timeline.
    pub fn second_labels(&self) -> Vec<SegmentLabel> {
        (0..self.duration_s).map(|s| self.label_at(s)).collect()
    }
}

/// One sampled one-second clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipSample {
    pub video_id: String,
    pub t_start: f64,
    pub t_end: f64,
    pub raw_feature: Vec<f64>,
    pub is_foreground: bool,
    pub class_id: Option<ClassId>,
}

impl ClipSample {
    pub fn center(&self) -> f64 {
        0.5 * (self.t_start + self.t_end)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_videos: usize,
    pub n_classes: usize,
    pub d_raw: usize,
    pub mean_duration_s: usize,
    /// Mean of the Poisson count of extra foreground segments beyond the first.
    pub extra_segments_mean: f64,
    pub max_fg_segments: usize,
    pub fg_fraction_min: f64,
    pub fg_fraction_max: f64,
    pub sigma_fg: f64,
    pub sigma_bg: f64,
    /// Norm of the per-video background offset.
    pub bg_offset_scale: f64,
    /// Fraction of foreground segments that receive a caption.
    pub caption_probability: f64,
    pub caption_vocab_size: usize,
    pub caption_min_tokens: usize,
    pub caption_max_tokens: usize,
    /// Chance that a caption token comes from its class shard rather than the
    /// shared shard.
    pub caption_class_token_prob: f64,
    /// Chance that a caption also names its action.
    pub caption_mentions_action: f64,
    /// Caption boundaries move by up to this many seconds.
    pub caption_jitter_s: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_videos: 200,
            n_classes: 10,
            d_raw: 32,
            mean_duration_s: 40,
            extra_segments_mean: 1.0,
            max_fg_segments: 4,
            fg_fraction_min: 0.3,
            fg_fraction_max: 0.6,
            sigma_fg: 0.35,
            sigma_bg: 0.35,
            bg_offset_scale: 0.8,
            caption_probability: 0.6,
            caption_vocab_size: 330,
            caption_min_tokens: 5,
            caption_max_tokens: 9,
            caption_class_token_prob: 0.5,
            caption_mentions_action: 0.5,
            caption_jitter_s: 1,
            seed: 7,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_videos == 0 || self.n_classes == 0 || self.d_raw == 0 {
            return err("n_videos, n_classes and d_raw must be positive");
        }
        if self.mean_duration_s < 4 {
            return err("mean_duration_s must be at least 4");
        }
        if self.max_fg_segments == 0 {
            return err("max_fg_segments must be positive");
        }
        if !(self.sigma_fg > 0.0 && self.sigma_bg > 0.0) {
            return err("noise scales must be positive");
        }
        if !(self.bg_offset_scale >= 0.0) {
            return err("bg_offset_scale must be non-negative");
        }
        if !(0.0 < self.fg_fraction_min
            && self.fg_fraction_min <= self.fg_fraction_max
            && self.fg_fraction_max < 1.0)
        {
            return err("foreground fractions must satisfy 0 < min <= max < 1");
        }
        if !(self.extra_segments_mean >= 0.0 && self.extra_segments_mean.is_finite()) {
            return err("extra_segments_mean must be non-negative");
        }
        for p in [
            self.caption_probability,
            self.caption_class_token_prob,
            self.caption_mentions_action,
        ] {
            if !(0.0..=1.0).contains(&p) {
                return err("probabilities must lie in [0, 1]");
            }
        }
        if self.caption_min_tokens == 0 || self.caption_min_tokens > self.caption_max_tokens {
            return err("caption token range must be non-empty and positive");
        }
        if self.caption_vocab_size < self.n_classes + 1 {
            return err("caption vocabulary needs at least one word per class plus a shared shard");
        }
        Ok(())
    }

    fn shard_size(&self) -> usize {
        self.caption_vocab_size / (self.n_classes + 1)
    }
}

/// Human-readable action names used as the class vocabulary.
pub fn class_names(n_classes: usize) -> Vec<String> {
    const NAMES: &[&str] = &[
        "surfing", "archery", "juggling", "skateboarding", "knitting", "fencing", "rowing",
        "bowling", "hurdling", "snorkeling", "kayaking", "ironing", "sculpting", "welding",
        "gargling", "skiing", "yodeling", "painting", "bartending", "drumming", "sailing",
        "wrestling", "plastering", "shoveling", "vacuuming", "zumba", "polishing", "rafting",
        "tumbling", "gardening", "hopscotch", "curling", "mowing", "baking", "dribbling",
        "paddling", "kneading", "hammering", "jogging", "waxing",
    ];
    (0..n_classes)
        .map(|i| match NAMES.get(i) {
            Some(n) if n_classes <= NAMES.len() => n.to_string(),
            _ => format!("action{i:03}"),
        })
        .collect()
}

fn caption_word(idx: usize) -> String {
    // Pronounceable, deterministic pseudo-words.
    const ONSET: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
    const VOWEL: &[&str] = &["a", "e", "i", "o", "u"];
    let mut s = String::new();
    let mut x = idx;
    for _ in 0..3 {
        s.push_str(ONSET[x % ONSET.len()]);
        x /= ONSET.len();
        s.push_str(VOWEL[x % VOWEL.len()]);
        x /= VOWEL.len();
    }
    s.push_str(&idx.to_string());
    s
}

fn unit_gaussian_vector<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let v: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

/// Class prototypes followed by the background prototype.
fn prototypes(cfg: &GeneratorConfig) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0);
    let classes = (0..cfg.n_classes)
        .map(|_| unit_gaussian_vector(cfg.d_raw, &mut rng))
        .collect();
    let bg = unit_gaussian_vector(cfg.d_raw, &mut rng);
    (classes, bg)
}

/// Splits `total` into `mins.len()` parts, part `i` at least `mins[i]`.
fn random_composition<R: Rng + ?Sized>(total: usize, mins: &[usize], rng: &mut R) -> Vec<usize> {
    let floor: usize = mins.iter().sum();
    debug_assert!(total >= floor);
    let extra = total - floor;
    let mut cuts: Vec<usize> = (0..mins.len().saturating_sub(1))
        .map(|_| rng.random_range(0..=extra))
        .collect();
    cuts.sort_unstable();
    let mut parts = Vec::with_capacity(mins.len());
    let mut prev = 0;
    for (i, &m) in mins.iter().enumerate() {
        let edge = cuts.get(i).copied().unwrap_or(extra);
        parts.push(m + edge - prev);
        prev = edge;
    }
    parts
}

fn generate_video(
    cfg: &GeneratorConfig,
    index: usize,
    class_protos: &[Vec<f64>],
    bg_proto: &[f64],
    names: &[String],
) -> UntrimmedVideo {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let d = cfg.d_raw;
    let class = index % cfg.n_classes;

    let lo = (cfg.mean_duration_s / 2).max(4);
    let hi = (cfg.mean_duration_s * 3 / 2).max(lo);
    let duration = rng.random_range(lo..=hi);

    let max_fg = cfg.max_fg_segments.min((duration + 1) / 3).max(1);
    let extra = if cfg.extra_segments_mean > 0.0 {
        Poisson::new(cfg.extra_segments_mean)
            .expect("positive mean")
            .sample(&mut rng) as usize
    } else {
        0
    };
    let n_fg = (1 + extra).min(max_fg);
    let frac = rng.random_range(cfg.fg_fraction_min..=cfg.fg_fraction_max);
    let fg_total = ((duration as f64 * frac).round() as usize)
        .clamp(2 * n_fg, duration - (n_fg - 1));
    let bg_total = duration - fg_total;
    let fg_lengths = random_composition(fg_total, &vec![2; n_fg], &mut rng);
    let mut gap_mins = vec![1; n_fg + 1];
    gap_mins[0] = 0;
    gap_mins[n_fg] = 0;
    let gaps = random_composition(bg_total, &gap_mins, &mut rng);

    let mut segments = Vec::new();
    let mut t = 0usize;
    for i in 0..=n_fg {
        if gaps[i] > 0 {
            segments.push(Segment {
                t_start: t as f64,
                t_end: (t + gaps[i]) as f64,
                class_id: None,
            });
            t += gaps[i];
        }
        if i < n_fg {
            segments.push(Segment {
                t_start: t as f64,
                t_end: (t + fg_lengths[i]) as f64,
                class_id: Some(class),
            });
            t += fg_lengths[i];
        }
    }
    debug_assert_eq!(t, duration);

    let fg_noise = Normal::new(0.0, cfg.sigma_fg).expect("positive sigma");
    let bg_noise = Normal::new(0.0, cfg.sigma_bg).expect("positive sigma");
    let offset: Vec<f64> = unit_gaussian_vector(d, &mut rng)
        .into_iter()
        .map(|v| v * cfg.bg_offset_scale)
        .collect();
    let mut clip_features = Vec::with_capacity(duration);
    for s in 0..duration {
        let seg = segments
            .iter()
            .find(|g| g.contains(s as f64, s as f64 + 1.0))
            .expect("timeline fully covered");
        let row: Vec<f64> = match seg.class_id {
            Some(c) => class_protos[c]
                .iter()
                .map(|m| m + fg_noise.sample(&mut rng))
                .collect(),
            None => bg_proto
                .iter()
                .zip(&offset)
                .map(|(m, o)| m + o + bg_noise.sample(&mut rng))
                .collect(),
        };
        clip_features.push(row);
    }

    let shard = cfg.shard_size();
    let common_start = cfg.n_classes * shard;
    let common_len = cfg.caption_vocab_size - common_start;
    let mut captions = Vec::new();
    for seg in segments.iter().filter(|s| s.is_foreground()) {
        if !rng.random_bool(cfg.caption_probability) {
            continue;
        }
        let c = seg.class_id.expect("foreground");
        let j = cfg.caption_jitter_s as i64;
        let mut start = seg.t_start as i64 + rng.random_range(-j..=j);
        let mut end = seg.t_end as i64 + rng.random_range(-j..=j);
        start = start.clamp(0, duration as i64);
        end = end.clamp(0, duration as i64);
        if end <= start {
            start = seg.t_start as i64;
            end = seg.t_end as i64;
        }
        let n_tokens = rng.random_range(cfg.caption_min_tokens..=cfg.caption_max_tokens);
        let mut tokens: Vec<String> = (0..n_tokens)
            .map(|_| {
                let idx = if rng.random_bool(cfg.caption_class_token_prob) {
                    c * shard + rng.random_range(0..shard)
                } else {
                    common_start + rng.random_range(0..common_len)
                };
                caption_word(idx)
            })
            .collect();
        if rng.random_bool(cfg.caption_mentions_action) {
            let at = rng.random_range(0..=tokens.len());
            tokens.insert(at, names[c].clone());
        }
        captions.push(TimedCaption {
            t_start: start as f64,
            t_end: end as f64,
            text: tokens.join(" "),
        });
    }

    UntrimmedVideo {
        id: format!("v{index:05}"),
        duration_s: duration,
        primary_class: class,
        clip_features,
        segments,
        captions,
    }
}

/// Generates a corpus. Every video draws from its own random stream, so the
/// result does not depend on `exec`.
pub fn generate_corpus_with(cfg: &GeneratorConfig, exec: Execution) -> Result<Vec<UntrimmedVideo>> {
    cfg.validate()?;
    let (class_protos, bg_proto) = prototypes(cfg);
    let names = class_names(cfg.n_classes);
    Ok(exec.map_range(cfg.n_videos, |i| {
        generate_video(cfg, i, &class_protos, &bg_proto, &names)
    }))
}

pub fn generate_corpus(cfg: &GeneratorConfig) -> Result<Vec<UntrimmedVideo>> {
    generate_corpus_with(cfg, Execution::default())
}

/// Samples one-second clips from every contiguous segment of `video`.
///
/// Training draws random starts (with replacement only when the segment is
/// shorter than `clips_per_segment` seconds). Evaluation places clip `i` at
/// offset `⌊i·len/n⌋` and does not touch `rng`.
pub fn sample_clips<R: Rng + ?Sized>(
    video: &UntrimmedVideo,
    clips_per_segment: usize,
    mode: SampleMode,
    rng: &mut R,
) -> Result<Vec<ClipSample>> {
    if clips_per_segment == 0 {
        return Err(Error::Input("clips_per_segment must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(video.segments.len() * clips_per_segment);
    for seg in &video.segments {
        let first = seg.t_start.ceil() as usize;
        let end = (seg.t_end.floor() as usize).min(video.duration_s);
        if end <= first {
            continue;
        }
        let len = end - first;
        let offsets: Vec<usize> = match mode {
            SampleMode::Eval => (0..clips_per_segment)
                .map(|i| i * len / clips_per_segment)
                .collect(),
            SampleMode::Train if len >= clips_per_segment => {
                rand::seq::index::sample(rng, len, clips_per_segment).into_vec()
            }
            SampleMode::Train => (0..clips_per_segment)
                .map(|_| rng.random_range(0..len))
                .collect(),
        };
        for off in offsets {
            let s = first + off;
            out.push(ClipSample {
                video_id: video.id.clone(),
                t_start: s as f64,
                t_end: s as f64 + 1.0,
                raw_feature: video.clip_features[s].clone(),
                is_foreground: seg.is_foreground(),
                class_id: seg.class_id,
            });
        }
    }
    Ok(out)
}

pub fn save_corpus(corpus: &[UntrimmedVideo], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for video in corpus {
        let line = serde_json::to_string(video).expect("corpus serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<UntrimmedVideo>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut corpus = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let video: UntrimmedVideo =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        video.validate().map_err(|e| parse_err(e.to_string()))?;
        corpus.push(video);
    }
    Ok(corpus)
}

pub fn save_class_names(names: &[String], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(names).expect("names serialize");
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_class_names(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Train/validation video split plus the class partition used for few-shot
/// evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub train_videos: Vec<String>,
    pub val_videos: Vec<String>,
    pub base_classes: Vec<ClassId>,
    pub novel_val_classes: Vec<ClassId>,
    pub novel_test_classes: Vec<ClassId>,
    /// SHA-256 over the lists above.
    pub checksum: String,
}

impl SplitManifest {
    /// Seeded split: `train_fraction` of videos for training; classes divided
    /// by `class_ratios` (base, val, test), rounding counts to the nearest
    /// integer and giving the remainder to base.
    pub fn build(
        corpus: &[UntrimmedVideo],
        n_classes: usize,
        train_fraction: f64,
        class_ratios: (f64, f64, f64),
        seed: u64,
    ) -> Result<Self> {
        if !(0.0 < train_fraction && train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        let total = class_ratios.0 + class_ratios.1 + class_ratios.2;
        if !(total > 0.0) || class_ratios.0 < 0.0 || class_ratios.1 < 0.0 || class_ratios.2 < 0.0 {
            return Err(Error::Config("class ratios must be non-negative with positive sum".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5711);
        let mut ids: Vec<String> = corpus.iter().map(|v| v.id.clone()).collect();
        ids.shuffle(&mut rng);
        let n_train = ((ids.len() as f64) * train_fraction).round() as usize;
        let n_train = n_train.clamp(usize::from(!ids.is_empty()), ids.len());
        let val_videos = ids.split_off(n_train);
        let mut train_videos = ids;
        train_videos.sort();
        let mut val_videos = val_videos;
        val_videos.sort();

        let mut classes: Vec<ClassId> = (0..n_classes).collect();
        classes.shuffle(&mut rng);
        let n_val = ((n_classes as f64) * class_ratios.1 / total).round() as usize;
        let n_test = ((n_classes as f64) * class_ratios.2 / total).round() as usize;
        if n_val + n_test >= n_classes {
            return Err(Error::Config("class split leaves no base classes".into()));
        }
        let mut novel_test_classes = classes.split_off(n_classes - n_test);
        let mut novel_val_classes = classes.split_off(n_classes - n_test - n_val);
        let mut base_classes = classes;
        base_classes.sort_unstable();
        novel_val_classes.sort_unstable();
        novel_test_classes.sort_unstable();
        let mut manifest = Self {
            train_videos,
            val_videos,
            base_classes,
            novel_val_classes,
            novel_test_classes,
            checksum: String::new(),
        };
        manifest.checksum = manifest.compute_checksum();
        Ok(manifest)
    }

    pub fn compute_checksum(&self) -> String {
        let mut h = Sha256::new();
        for list in [&self.train_videos, &self.val_videos] {
            for id in list {
                h.update(id.as_bytes());
                h.update(b"\n");
            }
            h.update(b"|");
        }
        for list in [&self.base_classes, &self.novel_val_classes, &self.novel_test_classes] {
            for c in list {
                h.update(c.to_string().as_bytes());
                h.update(b",");
            }
            h.update(b"|");
        }
        hex::encode(h.finalize())
    }

    pub fn verify(&self) -> Result<()> {
        if self.checksum != self.compute_checksum() {
            return Err(Error::Data("split manifest checksum mismatch".into()));
        }
        Ok(())
    }

    pub fn novel_classes(&self) -> Vec<ClassId> {
        let mut v: Vec<ClassId> = self
            .novel_val_classes
            .iter()
            .chain(&self.novel_test_classes)
            .copied()
            .collect();
        v.sort_unstable();
        v
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        m.verify()?;
        Ok(m)
    }
}

/// Videos whose ids appear in `ids`, in corpus order.
pub fn select_videos<'a>(corpus: &'a [UntrimmedVideo], ids: &[String]) -> Vec<&'a UntrimmedVideo> {
    let wanted: std::collections::HashSet<&str> = ids.iter().map(String::as_str).collect();
    corpus.iter().filter(|v| wanted.contains(v.id.as_str())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            n_videos: 12,
            seed,
            ..Default::default()
        }
    }

    fn video_with(segments: Vec<Segment>, duration: usize) -> UntrimmedVideo {
        UntrimmedVideo {
            id: "t".into(),
            duration_s: duration,
            primary_class: 0,
            clip_features: (0..duration).map(|s| vec![s as f64]).collect(),
            segments,
            captions: vec![],
        }
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        let a = generate_corpus(&small_cfg(7)).unwrap();
        let b = generate_corpus_with(&small_cfg(7), Execution::Sequential).unwrap();
        assert_eq!(a, b);
        for v in &a {
            v.validate().unwrap();
            assert!(v.foreground_segments().count() >= 1);
            assert_eq!(v.feature_dim(), 32);
        }
        assert_ne!(a, generate_corpus(&small_cfg(8)).unwrap());
    }

    #[test]
    fn noiseless_foreground_equals_prototype() {
        let cfg = GeneratorConfig {
            sigma_fg: 1e-300,
            ..small_cfg(1)
        };
        let corpus = generate_corpus(&cfg).unwrap();
        let mut seen: std::collections::HashMap<ClassId, Vec<f64>> = Default::default();
        for v in &corpus {
            for (s, label) in v.second_labels().into_iter().enumerate() {
                if let SegmentLabel::Foreground(c) = label {
                    let f = &v.clip_features[s];
                    let proto = seen.entry(c).or_insert_with(|| f.clone());
                    assert_eq!(proto, f);
                }
            }
        }
    }

    #[test]
    fn eval_sampling_uses_uniform_offsets() {
        let v = video_with(
            vec![Segment {
                t_start: 0.0,
                t_end: 10.0,
                class_id: Some(0),
            }],
            10,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let clips = sample_clips(&v, 5, SampleMode::Eval, &mut rng).unwrap();
        let starts: Vec<f64> = clips.iter().map(|c| c.t_start).collect();
        assert_eq!(starts, vec![0.0, 2.0, 4.0, 6.0, 8.0]);
        // No randomness consumed.
        let mut fresh = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(rng.random::<u64>(), fresh.random::<u64>());
    }

    #[test]
    fn one_second_segment_repeats_its_clip() {
        let v = video_with(
            vec![
                Segment {
                    t_start: 0.0,
                    t_end: 3.0,
                    class_id: None,
                },
                Segment {
                    t_start: 3.0,
                    t_end: 4.0,
                    class_id: Some(2),
                },
            ],
            4,
        );
        for mode in [SampleMode::Train, SampleMode::Eval] {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let clips = sample_clips(&v, 5, mode, &mut rng).unwrap();
            let fg: Vec<_> = clips.iter().filter(|c| c.is_foreground).collect();
            assert_eq!(fg.len(), 5);
            assert!(fg.iter().all(|c| c.t_start == 3.0 && c.t_end == 4.0));
            assert!(fg.iter().all(|c| c.class_id == Some(2)));
        }
    }

    #[test]
    fn train_sampling_without_replacement_when_possible() {
        let v = video_with(
            vec![Segment {
                t_start: 0.0,
                t_end: 6.0,
                class_id: None,
            }],
            6,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let clips = sample_clips(&v, 5, SampleMode::Train, &mut rng).unwrap();
        let mut starts: Vec<i64> = clips.iter().map(|c| c.t_start as i64).collect();
        starts.sort_unstable();
        starts.dedup();
        assert_eq!(starts.len(), 5);
        assert!(clips.iter().all(|c| !c.is_foreground && c.class_id.is_none()));
    }

    #[test]
    fn no_segments_no_clips_and_zero_count_rejected() {
        let v = video_with(vec![], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_clips(&v, 5, SampleMode::Train, &mut rng).unwrap().is_empty());
        assert!(sample_clips(&v, 0, SampleMode::Train, &mut rng).is_err());
    }

    #[test]
    fn validation_catches_broken_videos() {
        let mut v = video_with(
            vec![
                Segment {
                    t_start: 0.0,
                    t_end: 3.0,
                    class_id: Some(1),
                },
                Segment {
                    t_start: 2.0,
                    t_end: 4.0,
                    class_id: None,
                },
            ],
            4,
        );
        assert!(v.validate().is_err());
        v.segments[1].t_start = 3.0;
        v.validate().unwrap();
        v.clip_features.pop();
        assert!(v.validate().is_err());
    }

    #[test]
    fn manifest_partitions_classes() {
        let corpus = generate_corpus(&small_cfg(3)).unwrap();
        let m = SplitManifest::build(&corpus, 10, 0.75, (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!(m.base_classes.len(), 8);
        assert_eq!(m.novel_val_classes.len(), 1);
        assert_eq!(m.novel_test_classes.len(), 1);
        assert_eq!(m.train_videos.len() + m.val_videos.len(), 12);
        m.verify().unwrap();
        let big = SplitManifest::build(&corpus, 200, 0.75, (0.8, 0.1, 0.1), 0).unwrap();
        assert_eq!(
            (big.base_classes.len(), big.novel_val_classes.len(), big.novel_test_classes.len()),
            (160, 20, 20)
        );
    }
}
