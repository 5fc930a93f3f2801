//! Text for clips: synthetic prompts, caption assignment, and a frozen
//! hashing bag-of-words encoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{ClipSample, TimedCaption, UntrimmedVideo};
use crate::error::{Error, Result};
use crate::numkit::DenseMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextOrigin {
    Synthetic,
    Caption,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TextDescription {
    pub text: String,
    pub origin: TextOrigin,
    pub is_foreground: bool,
}

impl TextDescription {
    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.text.split_whitespace()
    }
}

/// `"foreground of <action>"` / `"background of <action>"`.
pub fn generate_prompt(action_name: &str, is_foreground: bool) -> Result<TextDescription> {
    let action = action_name.trim();
    if action.is_empty() {
        return Err(Error::Input("action name must not be empty".into()));
    }
    let kind = if is_foreground { "foreground" } else { "background" };
    Ok(TextDescription {
        text: format!("{kind} of {action}"),
        origin: TextOrigin::Synthetic,
        is_foreground,
    })
}

fn overlap(a_start: f64, a_end: f64, b_start: f64, b_end: f64) -> f64 {
    (a_end.min(b_end) - a_start.max(b_start)).max(0.0)
}

/// Among captions overlapping the clip, the one whose center is nearest the
/// clip center. Ties go to the lowest `t_start`, then to input order.
pub fn assign_caption<'a>(clip: &ClipSample, captions: &'a [TimedCaption]) -> Option<&'a TimedCaption> {
    let center = clip.center();
    captions
        .iter()
        .filter(|c| overlap(clip.t_start, clip.t_end, c.t_start, c.t_end) > 0.0)
        .min_by(|a, b| {
            let da = (a.center() - center).abs();
            let db = (b.center() - center).abs();
            da.total_cmp(&db).then(a.t_start.total_cmp(&b.t_start))
        })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    /// Captions and prompts mixed for every clip.
    Clap,
    /// Prompts only.
    ClapMaskPromptOnly,
    /// Background clips always prompted; foreground clips mixed.
    ClapDagger,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptPolicy {
    pub caption_probability: f64,
    pub variant: PromptVariant,
}

impl PromptPolicy {
    pub fn new(variant: PromptVariant) -> Self {
        Self {
            caption_probability: 0.5,
            variant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.caption_probability) {
            return Err(Error::Config("caption_probability must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

impl Default for PromptPolicy {
    fn default() -> Self {
        Self::new(PromptVariant::Clap)
    }
}

/// Class of the foreground segment nearest to the clip, else the video's
/// primary class.
fn nearest_action(clip: &ClipSample, video: &UntrimmedVideo) -> usize {
    if let Some(c) = clip.class_id {
        return c;
    }
    let center = clip.center();
    video
        .foreground_segments()
        .map(|s| {
            let dist = if center < s.t_start {
                s.t_start - center
            } else if center > s.t_end {
                center - s.t_end
            } else {
                0.0
            };
            (dist, s.t_start, s.class_id.expect("foreground"))
        })
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)))
        .map_or(video.primary_class, |(_, _, c)| c)
}

/// Picks the text paired with a clip under `policy`.
pub fn describe_clip<R: Rng + ?Sized>(
    clip: &ClipSample,
    video: &UntrimmedVideo,
    policy: &PromptPolicy,
    class_names: &[String],
    rng: &mut R,
) -> Result<TextDescription> {
    let class = nearest_action(clip, video);
    let name = class_names
        .get(class)
        .ok_or_else(|| Error::Config(format!("no class name for class {class}")))?;
    let try_caption = match policy.variant {
        PromptVariant::ClapMaskPromptOnly => false,
        PromptVariant::ClapDagger if !clip.is_foreground => false,
        PromptVariant::Clap | PromptVariant::ClapDagger => {
            rng.random_bool(policy.caption_probability)
        }
    };
    if try_caption {
        if let Some(caption) = assign_caption(clip, &video.captions) {
            return Ok(TextDescription {
                text: caption.text.clone(),
                origin: TextOrigin::Caption,
                is_foreground: clip.is_foreground,
            });
        }
    }
    generate_prompt(name, clip.is_foreground)
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Frozen token-embedding table standing in for a pretrained language model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderTable {
    vocab_hash_size: usize,
    table: DenseMatrix,
}

impl TextEncoderTable {
    pub fn new(vocab_hash_size: usize, d_text: usize, seed: u64) -> Result<Self> {
        if vocab_hash_size == 0 || d_text == 0 {
            return Err(Error::Config("text table sizes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..vocab_hash_size * d_text)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Ok(Self {
            vocab_hash_size,
            table: DenseMatrix::from_vec(vocab_hash_size, d_text, data)?,
        })
    }

    pub fn from_table(table: DenseMatrix) -> Result<Self> {
        if table.rows() == 0 || table.cols() == 0 {
            return Err(Error::Config("text table must be non-empty".into()));
        }
        Ok(Self {
            vocab_hash_size: table.rows(),
            table,
        })
    }

    pub fn vocab_hash_size(&self) -> usize {
        self.vocab_hash_size
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn table(&self) -> &DenseMatrix {
        &self.table
    }

    pub fn token_row(&self, token: &str) -> usize {
        (fnv1a64(token.to_lowercase().as_bytes()) % self.vocab_hash_size as u64) as usize
    }

    /// Mean of the rows of all whitespace tokens.
    pub fn encode_str(&self, text: &str) -> Result<Vec<f64>> {
        // Rows are summed in index order so the encoding ignores word order.
        let mut rows: Vec<usize> = text.split_whitespace().map(|t| self.token_row(t)).collect();
        if rows.is_empty() {
            return Err(Error::Input("cannot encode empty text".into()));
        }
        rows.sort_unstable();
        let n = rows.len();
        let mut acc = vec![0.0; self.dim()];
        for r in rows {
            for (a, v) in acc.iter_mut().zip(self.table.row(r)) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= n as f64);
        Ok(acc)
    }
}

pub fn encode_text(desc: &TextDescription, table: &TextEncoderTable) -> Result<Vec<f64>> {
    table.encode_str(&desc.text)
}
