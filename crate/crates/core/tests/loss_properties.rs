mod common;

use clapt::losses::{
    clip_loss, masked_loss, nce, total_loss, ClipLabel, ContrastiveBatch, ContrastiveOptions,
    LossBatch, Objective,
};
use clapt::numkit::{dot, DenseMatrix};
use common::{gaussian, random_batch, rng, unit};
use proptest::prelude::*;

fn batch_from(seed: u64, mask: &[bool], d: usize) -> ContrastiveBatch {
    random_batch(&mut rng(seed), mask.len(), d, |i| mask[i])
}

/// −log of the softmax probability of `logits[pos]`, evaluated in the most
/// literal way.
fn neg_log_softmax(logits: &[f64], pos: usize) -> f64 {
    let denom: f64 = logits.iter().map(|l| l.exp()).sum();
    -(logits[pos].exp() / denom).ln()
}

/// Term-by-term evaluation: for every kept pair, the video→text and
/// text→video cross-entropies over the whole batch, divided by |B|.
fn oracle_contrastive(b: &ContrastiveBatch, tau: f64, keep: impl Fn(usize) -> bool) -> f64 {
    let n = b.len();
    let p = &b.pairs;
    let mut total = 0.0;
    for i in (0..n).filter(|&i| keep(i)) {
        let row: Vec<f64> = (0..n).map(|j| dot(&p[i].z_v, &p[j].z_t) / tau).collect();
        let col: Vec<f64> = (0..n).map(|j| dot(&p[j].z_v, &p[i].z_t) / tau).collect();
        total += neg_log_softmax(&row, i) + neg_log_softmax(&col, i);
    }
    total / n as f64
}

#[test]
fn three_pair_clip_loss_matches_oracle() {
    let b = batch_from(3, &[true, false, true], 4);
    let want = oracle_contrastive(&b, 0.5, |_| true);
    let got = clip_loss(&b, 0.5).unwrap().0;
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn mixed_four_pair_masked_loss_matches_oracle() {
    let b = batch_from(4, &[true, false, false, true], 6);
    let want = oracle_contrastive(&b, 0.3, |i| b.pairs[i].is_foreground);
    let got = masked_loss(&b, 0.3).unwrap().0;
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

fn labels_for(b: &ContrastiveBatch) -> Vec<ClipLabel> {
    b.pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if p.is_foreground {
                ClipLabel::foreground(i % 3)
            } else {
                ClipLabel::background()
            }
        })
        .collect()
}

fn loss_batch(b: &ContrastiveBatch, seed: u64) -> LossBatch {
    let mut r = rng(seed);
    let n = b.len();
    LossBatch {
        embeddings: Some(b.clone()),
        class_logits: DenseMatrix::from_vec(n, 3, gaussian(&mut r, 3 * n)).unwrap(),
        region_logits: DenseMatrix::from_vec(n, 2, gaussian(&mut r, 2 * n)).unwrap(),
        labels: labels_for(b),
    }
}

#[test]
fn objective_composition() {
    let opts = ContrastiveOptions::default();
    let all_fg = batch_from(8, &[true; 6], 5);
    let lb = loss_batch(&all_fg, 1);
    let clap = total_loss(&lb, Objective::Clap, 0.07, opts).unwrap().0;
    let clip = total_loss(&lb, Objective::ClapClip, 0.07, opts).unwrap().0;
    assert_eq!(clap.l_total, clip.l_total);

    let mixed = batch_from(9, &[true, false, true, false, false], 5);
    let lb = loss_batch(&mixed, 2);
    let (r, g) = total_loss(&lb, Objective::Clap, 0.07, opts).unwrap();
    assert!((r.l_total - (r.l_ce.unwrap() + r.l_mask.unwrap())).abs() < 1e-12);
    assert!(r.l_clip.is_none());

    let (r, g_tac) = total_loss(&lb, Objective::Tac, 0.07, opts).unwrap();
    assert!(r.l_clip.is_none() && r.l_mask.is_none());
    assert!(g_tac.contrastive.is_none());
    assert_eq!(g_tac.classification, g.classification);

    let (r, g) = total_loss(&lb, Objective::ClapNoCls, 0.07, opts).unwrap();
    assert!(r.l_ce.is_none());
    assert!(g.classification.is_none());
    assert_eq!(r.l_total, r.l_mask.unwrap());

    let no_embeddings = LossBatch {
        embeddings: None,
        ..lb
    };
    assert!(matches!(
        total_loss(&no_embeddings, Objective::Clap, 0.07, opts),
        Err(clapt::Error::Config(_))
    ));
}

fn mask_strategy() -> impl Strategy<Value = Vec<bool>> {
    prop::collection::vec(any::<bool>(), 1..12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn masked_never_exceeds_clip(seed in any::<u64>(), mask in mask_strategy(), d in 2usize..10, tau in 0.02f64..2.0) {
        let b = batch_from(seed, &mask, d);
        let m = masked_loss(&b, tau).unwrap().0;
        let c = clip_loss(&b, tau).unwrap().0;
        prop_assert!(m <= c, "{} > {}", m, c);
    }

    #[test]
    fn indicator_extremes(seed in any::<u64>(), n in 1usize..12, d in 2usize..10, tau in 0.02f64..2.0) {
        let fg = batch_from(seed, &vec![true; n], d);
        let (m, gm) = masked_loss(&fg, tau).unwrap();
        let (c, gc) = clip_loss(&fg, tau).unwrap();
        prop_assert_eq!(m.to_bits(), c.to_bits());
        prop_assert_eq!(gm, gc);
        let bg = batch_from(seed, &vec![false; n], d);
        let (m, g) = masked_loss(&bg, tau).unwrap();
        prop_assert_eq!(m, 0.0);
        prop_assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn matches_term_by_term_oracle(seed in any::<u64>(), mask in mask_strategy(), d in 2usize..8, tau in 0.1f64..2.0) {
        let b = batch_from(seed, &mask, d);
        let c = clip_loss(&b, tau).unwrap().0;
        let m = masked_loss(&b, tau).unwrap().0;
        prop_assert!((c - oracle_contrastive(&b, tau, |_| true)).abs() < 1e-9);
        prop_assert!((m - oracle_contrastive(&b, tau, |i| mask[i])).abs() < 1e-9);
    }

    #[test]
    fn nce_candidates_sum_to_one(seed in any::<u64>(), n in 1usize..12, d in 2usize..10, tau in 0.01f64..5.0) {
        let mut r = rng(seed);
        let anchor = unit(&mut r, d);
        let cands: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut r, d)).collect();
        let total: f64 = (0..n)
            .map(|j| {
                let others: Vec<&[f64]> = (0..n).filter(|&k| k != j).map(|k| cands[k].as_slice()).collect();
                nce(&anchor, &cands[j], &others, tau).unwrap()
            })
            .sum();
        prop_assert!((total - 1.0).abs() < 1e-9, "sum {}", total);
    }

    #[test]
    fn argmax_candidate_ignores_temperature(seed in any::<u64>(), n in 2usize..10, d in 2usize..10, t1 in 0.01f64..5.0, t2 in 0.01f64..5.0) {
        let mut r = rng(seed);
        let anchor = unit(&mut r, d);
        let cands: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut r, d)).collect();
        let best = |tau: f64| -> usize {
            let probs: Vec<f64> = (0..n)
                .map(|j| {
                    let others: Vec<&[f64]> = (0..n).filter(|&k| k != j).map(|k| cands[k].as_slice()).collect();
                    nce(&anchor, &cands[j], &others, tau).unwrap()
                })
                .collect();
            (0..n).max_by(|&a, &b| probs[a].total_cmp(&probs[b])).unwrap()
        };
        prop_assert_eq!(best(t1), best(t2));
    }

    #[test]
    fn batch_order_does_not_matter(seed in any::<u64>(), mask in mask_strategy(), d in 2usize..8, rot in 0usize..12) {
        let b = batch_from(seed, &mask, d);
        let mut pairs = b.pairs.clone();
        let k = rot % pairs.len();
        pairs.rotate_left(k);
        pairs.reverse();
        let shuffled = ContrastiveBatch::new(pairs);
        for f in [clip_loss, masked_loss] {
            prop_assert_eq!(f(&b, 0.07).unwrap().0.to_bits(), f(&shuffled, 0.07).unwrap().0.to_bits());
        }
    }
}
