#![allow(dead_code)]

use clapt::evalkit::{Detection, GroundTruth};
use clapt::losses::{
    total_loss, ClipLabel, ContrastiveBatch, ContrastiveOptions, EmbeddingPair, LossBatch,
    LossReport, Objective,
};
use clapt::model::{BatchForward, ModelConfig, ModelState};
use clapt::numkit::{grad_check, normalized, DenseMatrix, Layer, GradCheckConfig, GradCheckReport};
use clapt::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    normalized(&gaussian(rng, d))
}

/// Random contrastive batch of `n` unit-norm pairs; `fg` decides each flag.
pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize, fg: impl Fn(usize) -> bool) -> ContrastiveBatch {
    ContrastiveBatch::new(
        (0..n)
            .map(|i| {
                let is_fg = fg(i);
                EmbeddingPair {
                    z_v: unit(rng, d),
                    z_t: unit(rng, d),
                    is_foreground: is_fg,
                    class_id: is_fg.then_some(0),
                    text_key: None,
                }
            })
            .collect(),
    )
}

/// Central differences need the loss to be smooth across the stencil, so
/// clips whose encoder preactivations sit within 1e-3 of a ReLU kink are
/// redrawn.
fn clear_of_kinks(model: &ModelState, x: &[f64]) -> bool {
    let mut h = DenseMatrix::from_vec(1, x.len(), x.to_vec()).unwrap();
    for layer in model.video_encoder.layers() {
        if let Layer::Affine(a) = layer {
            h = a.apply(&h).unwrap();
            if h.data().iter().any(|v| v.abs() < 1e-3) {
                return false;
            }
        } else {
            h = h.map(|v| v.max(0.0));
        }
    }
    true
}

/// One seeded full-model instance: raw clip features, frozen text encodings
/// and labels with at least one foreground and one background clip.
pub struct ModelInstance {
    pub model: ModelState,
    pub raw: DenseMatrix,
    pub text: DenseMatrix,
    pub labels: Vec<ClipLabel>,
}

impl ModelInstance {
    pub fn new(seed: u64, n: usize) -> Self {
        let mut cfg = ModelConfig::desk();
        cfg.seed = seed;
        let mut model = ModelState::new(&cfg).expect("desk config is valid");
        model.set_training(true);
        let mut r = rng(seed ^ 0x5eed);
        let raw: Vec<Vec<f64>> = (0..n)
            .map(|_| loop {
                let x = gaussian(&mut r, cfg.d_raw);
                if clear_of_kinks(&model, &x) {
                    break x;
                }
            })
            .collect();
        let text: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let words: Vec<String> = (0..r.random_range(2..6))
                    .map(|_| format!("w{}", r.random_range(0..200)))
                    .collect();
                model.text_table.encode_str(&words.join(" ")).expect("non-empty text")
            })
            .collect();
        let labels = (0..n)
            .map(|i| {
                let fg = match i {
                    0 => true,
                    1 => false,
                    _ => r.random_bool(0.6),
                };
                if fg {
                    ClipLabel::foreground(r.random_range(0..cfg.n_classes))
                } else {
                    ClipLabel::background()
                }
            })
            .collect();
        Self {
            model,
            raw: DenseMatrix::from_rows(&raw).unwrap(),
            text: DenseMatrix::from_rows(&text).unwrap(),
            labels,
        }
    }

    pub fn loss_batch(&self, fwd: &BatchForward) -> LossBatch {
        let embeddings = match (fwd.z_v(), fwd.z_t()) {
            (Some(zv), Some(zt)) => Some(ContrastiveBatch::new(
                (0..self.labels.len())
                    .map(|i| EmbeddingPair {
                        z_v: zv.row(i).to_vec(),
                        z_t: zt.row(i).to_vec(),
                        is_foreground: self.labels[i].foreground,
                        class_id: self.labels[i].class_id,
                        text_key: None,
                    })
                    .collect(),
            )),
            _ => None,
        };
        LossBatch {
            embeddings,
            class_logits: fwd.class_logits.clone(),
            region_logits: fwd.region_logits.clone(),
            labels: self.labels.clone(),
        }
    }

    pub fn loss(&self, model: &ModelState, objective: Objective) -> Result<LossReport> {
        let fwd = model.forward_batch(&self.raw, Some(&self.text))?;
        let tau = model.temperature();
        Ok(total_loss(&self.loss_batch(&fwd), objective, tau, ContrastiveOptions::default())?.0)
    }

    /// Analytic gradient of `objective` with respect to every model parameter.
    pub fn analytic(&self, objective: Objective) -> Result<Vec<f64>> {
        let fwd = self.model.forward_batch(&self.raw, Some(&self.text))?;
        let tau = self.model.temperature();
        let (_, grads) = total_loss(&self.loss_batch(&fwd), objective, tau, ContrastiveOptions::default())?;
        Ok(self.model.backward_batch(&fwd, &grads)?.to_flat())
    }

    pub fn grad_check(&self, objective: Objective) -> Result<GradCheckReport> {
        self.grad_check_with_floor(objective, GradCheckConfig::default().denominator_floor)
    }

    pub fn grad_check_with_floor(&self, objective: Objective, floor: f64) -> Result<GradCheckReport> {
        let analytic = self.analytic(objective)?;
        grad_check(
            &self.model,
            &analytic,
            |m| Ok(self.loss(m, objective)?.l_total),
            &GradCheckConfig {
                max_coords: usize::MAX,
                denominator_floor: floor,
                ..Default::default()
            },
        )
    }
}

/// Average precision straight from the definition: walk the ranked list,
/// match each detection to the first unmatched ground truth of its class and
/// video with the highest tIoU at or above `threshold`, then integrate the
/// upper envelope of precision over recall.
pub fn oracle_ap(dets: &[Detection], gts: &[GroundTruth], class_id: usize, threshold: f64) -> f64 {
    let gts: Vec<&GroundTruth> = gts.iter().filter(|g| g.class_id == class_id).collect();
    if gts.is_empty() {
        return 0.0;
    }
    let mut ranked: Vec<(usize, &Detection)> = dets
        .iter()
        .enumerate()
        .filter(|(_, d)| d.class_id == class_id)
        .collect();
    ranked.sort_by(|a, b| {
        b.1.score
            .partial_cmp(&a.1.score)
            .unwrap()
            .then(a.1.t_start.partial_cmp(&b.1.t_start).unwrap())
            .then(a.0.cmp(&b.0))
    });
    let mut used = vec![false; gts.len()];
    let mut tp = Vec::new();
    for (_, d) in &ranked {
        let mut best: Option<(usize, f64)> = None;
        for (k, g) in gts.iter().enumerate() {
            if used[k] || g.video_id != d.video_id {
                continue;
            }
            let inter = (d.t_end.min(g.t_end) - d.t_start.max(g.t_start)).max(0.0);
            let union = (d.t_end - d.t_start) + (g.t_end - g.t_start) - inter;
            let iou = if union > 0.0 { inter / union } else { 0.0 };
            if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((k, iou));
            }
        }
        match best {
            Some((k, _)) => {
                used[k] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    let n = gts.len() as f64;
    let mut precision = Vec::new();
    let mut recall = Vec::new();
    let mut hits = 0.0;
    for (i, &t) in tp.iter().enumerate() {
        if t {
            hits += 1.0;
        }
        precision.push(hits / (i + 1) as f64);
        recall.push(hits / n);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..tp.len() {
        let envelope = precision[i..].iter().copied().fold(0.0, f64::max);
        ap += (recall[i] - prev_recall) * envelope;
        prev_recall = recall[i];
    }
    ap
}
