//! Training objectives with exact gradients.
//!
//! Contrastive losses work on a batch of positive video/text pairs with
//! in-batch negatives. Each pair contributes a video→text and a text→video
//! cross-entropy term; the masked loss keeps only the terms of foreground
//! pairs while background embeddings still appear in every denominator.
//! Both contrastive losses are divided by the batch size, so the masked value
//! is a sub-sum of the clip value.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::ClassId;
use crate::error::{Error, Result};
use crate::language::PromptVariant;
use crate::numkit::{dot, DenseMatrix};

/// Sum of `values` after sorting, so the result does not depend on order.
fn ordered_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

/// `log Σ exp(x)` with max subtraction, order-independent.
fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    let mut terms: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    m + ordered_sum(&mut terms).ln()
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Input(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Softmax probability of the positive `target` among `{target} ∪ negatives`
/// as seen from `anchor`. Swapping the roles of video and text gives the other
/// direction.
pub fn nce(anchor: &[f64], target: &[f64], negatives: &[&[f64]], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let pos = dot(anchor, target) / tau;
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    logits.push(pos);
    logits.extend(negatives.iter().map(|n| dot(anchor, n) / tau));
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let numer = exps[0];
    Ok(numer / ordered_sum(&mut exps))
}

/// One positive pair with everything the objectives need.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingPair {
    pub z_v: Vec<f64>,
    pub z_t: Vec<f64>,
    pub is_foreground: bool,
    pub class_id: Option<ClassId>,
    /// Optional identity of the text, used when duplicate texts are excluded
    /// from each other's negatives.
    pub text_key: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContrastiveBatch {
    pub pairs: Vec<EmbeddingPair>,
}

impl ContrastiveBatch {
    pub fn new(pairs: Vec<EmbeddingPair>) -> Self {
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Indices of foreground pairs.
    pub fn foreground_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.pairs[i].is_foreground)
            .collect()
    }

    /// Checks shapes and that every embedding is unit-norm within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        self.check_shapes()?;
        for (i, p) in self.pairs.iter().enumerate() {
            for z in [&p.z_v, &p.z_t] {
                if (dot(z, z).sqrt() - 1.0).abs() > tol {
                    return Err(Error::Input(format!("embedding of pair {i} is not unit-norm")));
                }
            }
        }
        Ok(())
    }

    fn check_shapes(&self) -> Result<usize> {
        let first = self
            .pairs
            .first()
            .ok_or_else(|| Error::Input("contrastive batch is empty".into()))?;
        let d = first.z_v.len();
        if self.pairs.iter().any(|p| p.z_v.len() != d || p.z_t.len() != d) {
            return Err(Error::Input("embedding dimensions disagree".into()));
        }
        Ok(d)
    }
}

/// Gradients of a contrastive loss with respect to every embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveGrads {
    pub video: Vec<Vec<f64>>,
    pub text: Vec<Vec<f64>>,
}

impl ContrastiveGrads {
    fn zeros(n: usize, d: usize) -> Self {
        Self {
            video: vec![vec![0.0; d]; n],
            text: vec![vec![0.0; d]; n],
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.video
            .iter()
            .chain(&self.text)
            .flatten()
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveOptions {
    /// Exclude pairs with identical text keys from each other's negatives.
    pub dedupe_negatives: bool,
}

/// Shared core of the clip and masked losses: `weights[i]` scales both
/// cross-entropy terms of pair `i`.
fn weighted_contrastive(
    batch: &ContrastiveBatch,
    tau: f64,
    weights: &[f64],
    opts: ContrastiveOptions,
) -> Result<(f64, ContrastiveGrads)> {
    check_tau(tau)?;
    let d = batch.check_shapes()?;
    let n = batch.len();
    let p = &batch.pairs;

    let mut logits = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            logits.set(i, j, dot(&p[i].z_v, &p[j].z_t) / tau);
        }
    }
    let excluded = |i: usize, j: usize| -> bool {
        opts.dedupe_negatives
            && i != j
            && matches!((p[i].text_key, p[j].text_key), (Some(a), Some(b)) if a == b)
    };

    let mut terms = Vec::with_capacity(2 * n);
    // d loss / d logits[i][j]
    let mut dlogits = DenseMatrix::zeros(n, n);
    for i in 0..n {
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        // video i → texts (row i)
        let row: Vec<(usize, f64)> = (0..n)
            .filter(|&j| !excluded(i, j))
            .map(|j| (j, logits.get(i, j)))
            .collect();
        let vals: Vec<f64> = row.iter().map(|r| r.1).collect();
        let lse = log_sum_exp(&vals);
        terms.push(w * (lse - logits.get(i, i)));
        for &(j, l) in &row {
            let prob = (l - lse).exp();
            let delta = if j == i { 1.0 } else { 0.0 };
            let g = dlogits.get(i, j) + w * (prob - delta);
            dlogits.set(i, j, g);
        }
        // text i → videos (column i)
        let col: Vec<(usize, f64)> = (0..n)
            .filter(|&j| !excluded(i, j))
            .map(|j| (j, logits.get(j, i)))
            .collect();
        let vals: Vec<f64> = col.iter().map(|c| c.1).collect();
        let lse = log_sum_exp(&vals);
        terms.push(w * (lse - logits.get(i, i)));
        for &(j, l) in &col {
            let prob = (l - lse).exp();
            let delta = if j == i { 1.0 } else { 0.0 };
            let g = dlogits.get(j, i) + w * (prob - delta);
            dlogits.set(j, i, g);
        }
    }
    let value = ordered_sum(&mut terms);

    let mut grads = ContrastiveGrads::zeros(n, d);
    for i in 0..n {
        for j in 0..n {
            let g = dlogits.get(i, j) / tau;
            if g == 0.0 {
                continue;
            }
            for k in 0..d {
                grads.video[i][k] += g * p[j].z_t[k];
                grads.text[j][k] += g * p[i].z_v[k];
            }
        }
    }
    Ok((value, grads))
}

/// Symmetric in-batch InfoNCE over all pairs, averaged over the batch.
pub fn clip_loss(batch: &ContrastiveBatch, tau: f64) -> Result<(f64, ContrastiveGrads)> {
    clip_loss_with(batch, tau, ContrastiveOptions::default())
}

pub fn clip_loss_with(
    batch: &ContrastiveBatch,
    tau: f64,
    opts: ContrastiveOptions,
) -> Result<(f64, ContrastiveGrads)> {
    let n = batch.len();
    let weights = vec![1.0 / n.max(1) as f64; n];
    weighted_contrastive(batch, tau, &weights, opts)
}

/// Clip loss restricted to the terms of foreground pairs; background
/// embeddings stay in the negative sets. Zero when no pair is foreground.
pub fn masked_loss(batch: &ContrastiveBatch, tau: f64) -> Result<(f64, ContrastiveGrads)> {
    masked_loss_with(batch, tau, ContrastiveOptions::default())
}

pub fn masked_loss_with(
    batch: &ContrastiveBatch,
    tau: f64,
    opts: ContrastiveOptions,
) -> Result<(f64, ContrastiveGrads)> {
    let n = batch.len();
    let weights: Vec<f64> = batch
        .pairs
        .iter()
        .map(|p| if p.is_foreground { 1.0 / n.max(1) as f64 } else { 0.0 })
        .collect();
    weighted_contrastive(batch, tau, &weights, opts)
}

/// Region (background/foreground) and action-class targets of one clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClipLabel {
    pub foreground: bool,
    pub class_id: Option<ClassId>,
}

impl ClipLabel {
    pub fn background() -> Self {
        Self {
            foreground: false,
            class_id: None,
        }
    }

    pub fn foreground(class_id: ClassId) -> Self {
        Self {
            foreground: true,
            class_id: Some(class_id),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationGrads {
    pub class_logits: DenseMatrix,
    pub region_logits: DenseMatrix,
}

/// Returns `(-log softmax(logits)[target], softmax(logits) - onehot)`.
fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let lse = log_sum_exp(logits);
    let grad = logits
        .iter()
        .enumerate()
        .map(|(k, l)| (l - lse).exp() - if k == target { 1.0 } else { 0.0 })
        .collect();
    (lse - logits[target], grad)
}

/// Mean over clips of `CE(region) + [foreground]·CE(class)`.
pub fn classification_loss(
    class_logits: &DenseMatrix,
    region_logits: &DenseMatrix,
    labels: &[ClipLabel],
) -> Result<(f64, ClassificationGrads)> {
    let n = labels.len();
    if n == 0 || class_logits.rows() != n || region_logits.rows() != n {
        return Err(Error::Input(format!(
            "{n} labels for {} class rows and {} region rows",
            class_logits.rows(),
            region_logits.rows()
        )));
    }
    if region_logits.cols() != 2 {
        return Err(Error::Input("region logits must have two columns".into()));
    }
    let c = class_logits.cols();
    let mut grads = ClassificationGrads {
        class_logits: DenseMatrix::zeros(n, c),
        region_logits: DenseMatrix::zeros(n, 2),
    };
    let mut terms = Vec::with_capacity(2 * n);
    let inv_n = 1.0 / n as f64;
    for (i, label) in labels.iter().enumerate() {
        let (v, g) = cross_entropy(region_logits.row(i), usize::from(label.foreground));
        terms.push(v * inv_n);
        for (dst, gv) in grads.region_logits.row_mut(i).iter_mut().zip(g) {
            *dst = gv * inv_n;
        }
        match (label.foreground, label.class_id) {
            (true, Some(cls)) => {
                if cls >= c {
                    return Err(Error::Input(format!("class {cls} outside {c} logits")));
                }
                let (v, g) = cross_entropy(class_logits.row(i), cls);
                terms.push(v * inv_n);
                for (dst, gv) in grads.class_logits.row_mut(i).iter_mut().zip(g) {
                    *dst = gv * inv_n;
                }
            }
            (true, None) => {
                return Err(Error::Input(format!("foreground clip {i} lacks a class label")))
            }
            (false, Some(_)) => {
                return Err(Error::Input(format!("background clip {i} carries a class label")))
            }
            (false, None) => {}
        }
    }
    Ok((ordered_sum(&mut terms), grads))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Objective {
    #[serde(rename = "tac")]
    Tac,
    #[serde(rename = "clap-clip")]
    ClapClip,
    #[serde(rename = "clap-mask")]
    ClapMask,
    #[serde(rename = "clap")]
    Clap,
    #[serde(rename = "clap-dagger")]
    ClapDagger,
    #[serde(rename = "clap-no-cls")]
    ClapNoCls,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContrastiveKind {
    Clip,
    Masked,
}

impl Objective {
    pub const ALL: [Objective; 6] = [
        Objective::Tac,
        Objective::ClapClip,
        Objective::ClapMask,
        Objective::Clap,
        Objective::ClapDagger,
        Objective::ClapNoCls,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Tac => "tac",
            Objective::ClapClip => "clap-clip",
            Objective::ClapMask => "clap-mask",
            Objective::Clap => "clap",
            Objective::ClapDagger => "clap-dagger",
            Objective::ClapNoCls => "clap-no-cls",
        }
    }

    pub fn uses_classification(self) -> bool {
        self != Objective::ClapNoCls
    }

    pub fn contrastive(self) -> Option<ContrastiveKind> {
        match self {
            Objective::Tac => None,
            Objective::ClapClip => Some(ContrastiveKind::Clip),
            _ => Some(ContrastiveKind::Masked),
        }
    }

    /// How clip descriptions are chosen for this objective.
    pub fn prompt_variant(self) -> PromptVariant {
        match self {
            Objective::Tac | Objective::ClapClip | Objective::ClapMask => {
                PromptVariant::ClapMaskPromptOnly
            }
            Objective::Clap | Objective::ClapNoCls => PromptVariant::Clap,
            Objective::ClapDagger => PromptVariant::ClapDagger,
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown objective '{s}'")))
    }
}

/// Per-term breakdown of one objective evaluation. Absent terms are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_clip: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_mask: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_ce: Option<f64>,
    pub l_total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.l_clip, self.l_mask, self.l_ce]
            .into_iter()
            .flatten()
            .chain([self.l_total])
            .all(f64::is_finite)
    }
}

/// Everything an objective reads for one batch.
#[derive(Clone, Debug)]
pub struct LossBatch {
    /// Required by every objective with a contrastive term.
    pub embeddings: Option<ContrastiveBatch>,
    pub class_logits: DenseMatrix,
    pub region_logits: DenseMatrix,
    pub labels: Vec<ClipLabel>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossGrads {
    pub contrastive: Option<ContrastiveGrads>,
    pub classification: Option<ClassificationGrads>,
}

/// Evaluates `objective` and its gradients.
pub fn total_loss(
    batch: &LossBatch,
    objective: Objective,
    tau: f64,
    opts: ContrastiveOptions,
) -> Result<(LossReport, LossGrads)> {
    let mut report = LossReport {
        l_clip: None,
        l_mask: None,
        l_ce: None,
        l_total: 0.0,
    };
    let mut grads = LossGrads {
        contrastive: None,
        classification: None,
    };
    if objective.uses_classification() {
        let (v, g) = classification_loss(&batch.class_logits, &batch.region_logits, &batch.labels)?;
        report.l_ce = Some(v);
        report.l_total += v;
        grads.classification = Some(g);
    }
    if let Some(kind) = objective.contrastive() {
        let emb = batch.embeddings.as_ref().ok_or_else(|| {
            Error::Config(format!("objective {objective} needs embeddings"))
        })?;
        let (v, g) = match kind {
            ContrastiveKind::Clip => {
                let r = clip_loss_with(emb, tau, opts)?;
                report.l_clip = Some(r.0);
                r
            }
            ContrastiveKind::Masked => {
                let r = masked_loss_with(emb, tau, opts)?;
                report.l_mask = Some(r.0);
                r
            }
        };
        report.l_total += v;
        grads.contrastive = Some(g);
    }
    Ok((report, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(z_v: &[f64], z_t: &[f64], fg: bool) -> EmbeddingPair {
        EmbeddingPair {
            z_v: z_v.to_vec(),
            z_t: z_t.to_vec(),
            is_foreground: fg,
            class_id: if fg { Some(0) } else { None },
            text_key: None,
        }
    }

    #[test]
    fn nce_scalar_cases() {
        let a = [1.0, 0.0];
        assert_eq!(nce(&a, &a, &[], 0.07).unwrap(), 1.0);
        for tau in [0.01, 0.5, 3.0] {
            assert_eq!(nce(&a, &[0.6, 0.8], &[&[0.6, -0.8]], tau).unwrap(), 0.5);
        }
        // e / (e + 1)
        let p = nce(&a, &a, &[&[0.0, 1.0]], 1.0).unwrap();
        assert!((p - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert!(matches!(nce(&a, &a, &[], 0.0), Err(Error::Input(_))));
    }

    #[test]
    fn single_pair_clip_loss_is_zero() {
        let b = ContrastiveBatch::new(vec![pair(&[1.0, 0.0], &[0.0, 1.0], true)]);
        let (v, g) = clip_loss(&b, 0.07).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g.max_abs(), 0.0);
        assert!(clip_loss(&ContrastiveBatch::default(), 0.07).is_err());
    }

    #[test]
    fn masked_edge_cases() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let mk = |fg: bool| {
            ContrastiveBatch::new(vec![
                pair(&[1.0, 0.0], &[s, s], fg),
                pair(&[0.0, 1.0], &[-s, s], fg),
                pair(&[s, -s], &[1.0, 0.0], fg),
            ])
        };
        let (v, g) = masked_loss(&mk(false), 0.1).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g.max_abs(), 0.0);
        let (m, gm) = masked_loss(&mk(true), 0.1).unwrap();
        let (c, gc) = clip_loss(&mk(true), 0.1).unwrap();
        assert_eq!(m, c);
        assert_eq!(gm, gc);
    }

    #[test]
    fn uniform_logits_cross_entropy() {
        let class = DenseMatrix::zeros(1, 4);
        let region = DenseMatrix::zeros(1, 2);
        let (v, _) = classification_loss(&class, &region, &[ClipLabel::foreground(3)]).unwrap();
        assert!((v - (2f64.ln() + 4f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn background_clip_ignores_class_logits() {
        let class = DenseMatrix::from_vec(1, 3, vec![0.3, -1.0, 2.0]).unwrap();
        let region = DenseMatrix::from_vec(1, 2, vec![0.5, -0.5]).unwrap();
        let (v, g) = classification_loss(&class, &region, &[ClipLabel::background()]).unwrap();
        let expected = (0.5f64.exp() + (-0.5f64).exp()).ln() - 0.5;
        assert!((v - expected).abs() < 1e-15);
        assert_eq!(g.class_logits.max_abs(), 0.0);
    }

    #[test]
    fn confident_correct_region_term_vanishes() {
        let class = DenseMatrix::zeros(1, 2);
        let region = DenseMatrix::from_vec(1, 2, vec![-40.0, 40.0]).unwrap();
        let label = ClipLabel {
            foreground: true,
            class_id: Some(0),
        };
        let (v, _) = classification_loss(&class, &region, &[label]).unwrap();
        // Only the class term ln 2 remains.
        assert!((v - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn label_consistency_is_enforced() {
        let class = DenseMatrix::zeros(1, 2);
        let region = DenseMatrix::zeros(1, 2);
        let missing = ClipLabel {
            foreground: true,
            class_id: None,
        };
        assert!(matches!(
            classification_loss(&class, &region, &[missing]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn objective_names_round_trip() {
        for o in Objective::ALL {
            assert_eq!(o.name().parse::<Objective>().unwrap(), o);
        }
        assert!(matches!("clip".parse::<Objective>(), Err(Error::Config(_))));
    }

    #[test]
    fn dedupe_removes_duplicate_negatives() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let mut b = ContrastiveBatch::new(vec![
            pair(&[1.0, 0.0], &[s, s], true),
            pair(&[0.0, 1.0], &[s, s], true),
        ]);
        b.pairs[0].text_key = Some(1);
        b.pairs[1].text_key = Some(1);
        let opts = ContrastiveOptions {
            dedupe_negatives: true,
        };
        let (v, _) = clip_loss_with(&b, 0.1, opts).unwrap();
        assert_eq!(v, 0.0);
        let (v, _) = clip_loss(&b, 0.1).unwrap();
        assert!(v > 0.0);
    }
}
