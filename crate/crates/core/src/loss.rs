//! Set-prediction training objective: Hungarian matching of ground-truth
//! segments to queries, then mask BCE + dice on matched pairs and weighted
//! cross-entropy on every query's class distribution.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::head::{BlockPrediction, SegmentPrediction};
use crate::hungarian::{hungarian_match, MatchAssignment};
use crate::tensor::{self, Tensor};

/// Smoothing constant of the dice loss.
pub const DICE_SMOOTH: f64 = 1.0;
/// Probability clamp for BCE computed from probabilities.
const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthSegment {
    /// Binary `[h, w]` mask at the prediction resolution.
    pub mask: Tensor,
    pub class_id: usize,
    pub is_thing: bool,
}

impl GroundTruthSegment {
    pub fn new(mask: Tensor, class_id: usize, is_thing: bool) -> Result<Self> {
        if mask.ndim() != 2 {
            return Err(shape_err!("ground-truth mask must be [h, w], got {:?}", mask.shape()));
        }
        if !mask.data().iter().all(|&v| v == 0.0 || v == 1.0) {
            return Err(Error::Data("ground-truth mask must be binary".into()));
        }
        if !mask.data().contains(&1.0) {
            return Err(Error::Data(format!("empty ground-truth mask for class {class_id}")));
        }
        Ok(Self {
            mask,
            class_id,
            is_thing,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub ce: f64,
    pub dice: f64,
    pub cls: f64,
    /// Cross-entropy weight of queries assigned to the no-object class.
    pub no_object_weight: f64,
    /// Supervise every decoder block's prediction, not only the last.
    pub deep_supervision: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ce: 5.0,
            dice: 5.0,
            cls: 2.0,
            no_object_weight: 0.1,
            deep_supervision: true,
        }
    }
}

/// `1 - (2·Σpg + s) / (Σp + Σg + s)`.
pub fn dice_loss(pred: &Tensor, gt: &Tensor) -> f64 {
    let inter: f64 = pred.data().iter().zip(gt.data()).map(|(p, g)| p * g).sum();
    1.0 - (2.0 * inter + DICE_SMOOTH) / (pred.sum() + gt.sum() + DICE_SMOOTH)
}

/// Mean BCE of probabilities against a binary target (probabilities clamped).
pub fn mask_bce_loss(pred: &Tensor, gt: &Tensor) -> f64 {
    let n = pred.numel().max(1) as f64;
    pred.data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

/// Mean BCE evaluated on logits.
pub fn mask_bce_from_logits(logits: &[f64], gt: &[f64]) -> f64 {
    let n = logits.len().max(1) as f64;
    logits
        .iter()
        .zip(gt)
        .map(|(&z, &g)| z.max(0.0) - z * g + (-z.abs()).exp().ln_1p())
        .sum::<f64>()
        / n
}

/// Class target and weight for every query under an assignment.
fn class_targets(
    num_queries: usize,
    no_object: usize,
    assignment: &MatchAssignment,
    gt_classes: &[usize],
    no_object_weight: f64,
) -> (Vec<usize>, Vec<f64>) {
    let mut targets = vec![no_object; num_queries];
    let mut weights = vec![no_object_weight; num_queries];
    for &(g, q) in &assignment.pairs {
        targets[q] = gt_classes[g];
        weights[q] = 1.0;
    }
    (targets, weights)
}

/// Weighted mean cross-entropy over all queries: matched queries target
/// their ground-truth class, the rest the no-object class.
pub fn classification_loss(
    class_dists: &Tensor,
    assignment: &MatchAssignment,
    gt_classes: &[usize],
    no_object_weight: f64,
) -> Result<f64> {
    let (n, k1) = class_dists.dims2()?;
    let (targets, weights) = class_targets(n, k1 - 1, assignment, gt_classes, no_object_weight);
    let total_w: f64 = weights.iter().sum();
    let ce: f64 = (0..n)
        .map(|q| -weights[q] * class_dists.data()[q * k1 + targets[q]].max(f64::MIN_POSITIVE).ln())
        .sum();
    Ok(if total_w > 0.0 { ce / total_w } else { 0.0 })
}

fn check_gts(gts: &[GroundTruthSegment], n: usize, k1: usize, pixels: usize) -> Result<()> {
    if gts.len() > n {
        return Err(Error::Data(format!(
            "{} ground-truth segments exceed {} queries (classes {:?})",
            gts.len(),
            n,
            gts.iter().map(|g| g.class_id).collect::<Vec<_>>()
        )));
    }
    for (i, g) in gts.iter().enumerate() {
        if g.mask.numel() != pixels {
            return Err(shape_err!(
                "ground-truth segment {} has {} pixels, predictions have {}",
                i,
                g.mask.numel(),
                pixels
            ));
        }
        if g.class_id + 1 >= k1 {
            return Err(Error::Data(format!("ground-truth class {} out of range", g.class_id)));
        }
    }
    Ok(())
}

/// `λ_ce·bce + λ_dice·dice − λ_cls·p[class]` for every (gt, query) pair,
/// from probability masks.
pub fn match_cost_matrix(
    pred: &SegmentPrediction,
    gts: &[GroundTruthSegment],
    weights: &LossWeights,
) -> Result<Tensor> {
    let (n, k1) = pred.class_dists.dims2()?;
    let pixels = pred.masks.numel() / n.max(1);
    check_gts(gts, n, k1, pixels)?;
    let masks: Vec<Tensor> = (0..n)
        .map(|q| Tensor::new(vec![pixels], pred.masks.data()[q * pixels..(q + 1) * pixels].to_vec()))
        .collect::<Result<_>>()?;
    let mut cost = Vec::with_capacity(gts.len() * n);
    for g in gts {
        let gm = g.mask.reshape(vec![pixels])?;
        for (q, m) in masks.iter().enumerate() {
            cost.push(
                weights.ce * mask_bce_loss(m, &gm) + weights.dice * dice_loss(m, &gm)
                    - weights.cls * pred.class_dists.data()[q * k1 + g.class_id],
            );
        }
    }
    Tensor::new(vec![gts.len(), n], cost)
}

/// Same cost as [`match_cost_matrix`] but from raw logits, with BCE taken on logits.
pub fn cost_matrix_from_logits(
    class_logits: &Tensor,
    mask_logits: &Tensor,
    gts: &[GroundTruthSegment],
    weights: &LossWeights,
) -> Result<Tensor> {
    let (n, k1) = class_logits.dims2()?;
    let (_, pixels) = mask_logits.dims2()?;
    check_gts(gts, n, k1, pixels)?;
    let probs = tensor::softmax(class_logits, 1)?;
    let sig = tensor::sigmoid(mask_logits);
    let mut cost = Vec::with_capacity(gts.len() * n);
    for g in gts {
        let gm = g.mask.data();
        let g_sum: f64 = gm.iter().sum();
        for q in 0..n {
            let z = &mask_logits.data()[q * pixels..(q + 1) * pixels];
            let p = &sig.data()[q * pixels..(q + 1) * pixels];
            let inter: f64 = p.iter().zip(gm).map(|(a, b)| a * b).sum();
            let p_sum: f64 = p.iter().sum();
            let dice = 1.0 - (2.0 * inter + DICE_SMOOTH) / (p_sum + g_sum + DICE_SMOOTH);
            cost.push(
                weights.ce * mask_bce_from_logits(z, gm) + weights.dice * dice
                    - weights.cls * probs.data()[q * k1 + g.class_id],
            );
        }
    }
    Tensor::new(vec![gts.len(), n], cost)
}

/// Individual terms of one supervised output.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub mask_bce: f64,
    pub dice: f64,
    pub cls: f64,
    pub total: f64,
}

/// Differentiable loss of one prediction; matching is recomputed from its values.
pub fn output_loss(
    tape: &mut Tape,
    pred: &BlockPrediction,
    gts: &[GroundTruthSegment],
    weights: &LossWeights,
) -> Result<(Var, LossTerms, MatchAssignment)> {
    let cost = cost_matrix_from_logits(
        tape.value(pred.class_logits),
        tape.value(pred.mask_logits),
        gts,
        weights,
    )?;
    let assignment = hungarian_match(&cost)?;
    let (n, k1) = tape.value(pred.class_logits).dims2()?;
    let pixels = tape.shape(pred.mask_logits)[1];

    let mut terms = LossTerms::default();
    let mut total = None;
    if !gts.is_empty() {
        let rows: Vec<usize> = assignment.pairs.iter().map(|p| p.1).collect();
        let mut target = Vec::with_capacity(rows.len() * pixels);
        for &(g, _) in &assignment.pairs {
            target.extend_from_slice(gts[g].mask.data());
        }
        let target = Tensor::new(vec![rows.len(), pixels], target)?;
        let selected = tape.gather_rows(pred.mask_logits, &rows)?;
        let bce = tape.bce_with_logits(selected, &target)?;

        let probs = tape.sigmoid(selected);
        let tgt = tape.constant(target.clone());
        let overlap = tape.mul(probs, tgt)?;
        let inter = tape.sum_rows(overlap)?;
        let num = tape.affine(inter, 2.0, DICE_SMOOTH);
        let p_sum = tape.sum_rows(probs)?;
        let g_sums: Vec<f64> = target.data().chunks(pixels).map(|r| r.iter().sum::<f64>() + DICE_SMOOTH).collect();
        let g_sums = tape.constant(Tensor::new(vec![rows.len()], g_sums)?);
        let den = tape.add(p_sum, g_sums)?;
        let ratio = tape.div(num, den)?;
        let mean_ratio = tape.mean(ratio);
        let dice = tape.affine(mean_ratio, -1.0, 1.0);

        terms.mask_bce = tape.value(bce).item();
        terms.dice = tape.value(dice).item();
        let wb = tape.scale(bce, weights.ce);
        let wd = tape.scale(dice, weights.dice);
        total = Some(tape.add(wb, wd)?);
    }

    let gt_classes: Vec<usize> = gts.iter().map(|g| g.class_id).collect();
    let (targets, cw) = class_targets(n, k1 - 1, &assignment, &gt_classes, weights.no_object_weight);
    let total_w: f64 = cw.iter().sum();
    let logp = tape.log_softmax_rows(pred.class_logits)?;
    let at: Vec<(usize, usize)> = targets.iter().enumerate().map(|(q, &t)| (q, t)).collect();
    let picked = tape.pick(logp, &at)?;
    let cw = tape.constant(Tensor::new(vec![n], cw)?);
    let weighted = tape.mul(picked, cw)?;
    let summed = tape.sum(weighted);
    let cls = tape.scale(summed, if total_w > 0.0 { -1.0 / total_w } else { 0.0 });
    terms.cls = tape.value(cls).item();
    let wc = tape.scale(cls, weights.cls);
    let loss = match total {
        Some(t) => tape.add(t, wc)?,
        None => wc,
    };
    terms.total = tape.value(loss).item();
    Ok((loss, terms, assignment))
}

/// Sum of [`output_loss`] over the supervised block predictions (every block
/// with deep supervision, otherwise only the last), each matched on its own.
pub fn total_loss(
    tape: &mut Tape,
    blocks: &[BlockPrediction],
    gts: &[GroundTruthSegment],
    weights: &LossWeights,
) -> Result<(Var, Vec<LossTerms>)> {
    let supervised = if weights.deep_supervision {
        blocks
    } else {
        &blocks[blocks.len().saturating_sub(1)..]
    };
    if supervised.is_empty() {
        return Err(Error::Usage("no predictions to supervise".into()));
    }
    let mut total = None;
    let mut terms = Vec::with_capacity(supervised.len());
    for b in supervised {
        let (l, t, _) = output_loss(tape, b, gts, weights)?;
        terms.push(t);
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    Ok((total.expect("nonempty"), terms))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_examples() {
        let ones = Tensor::ones(vec![4]);
        let zeros = Tensor::zeros(vec![4]);
        assert_eq!(dice_loss(&ones, &ones), 0.0);
        assert!((dice_loss(&ones, &zeros) - 0.8).abs() < 1e-15);
        for n in [1usize, 4, 9, 100] {
            let half = Tensor::full(vec![n], 0.5);
            let gt = Tensor::ones(vec![n]);
            let expect = 1.0 - (n as f64 + 1.0) / (1.5 * n as f64 + 1.0);
            assert!((dice_loss(&half, &gt) - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn bce_examples() {
        let gt = Tensor::new(vec![4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(mask_bce_loss(&gt, &gt) < 1e-11);
        let half = Tensor::full(vec![4], 0.5);
        assert!((mask_bce_loss(&half, &gt) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((mask_bce_from_logits(&[0.0; 4], gt.data()) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn classification_examples() {
        // Single query, single GT, prob p on the true class.
        let p = 0.3;
        let dists = Tensor::new(vec![1, 3], vec![p, 0.5, 0.2]).unwrap();
        let a = MatchAssignment {
            pairs: vec![(0, 0)],
            total_cost: 0.0,
        };
        assert!((classification_loss(&dists, &a, &[0], 0.1).unwrap() + p.ln()).abs() < 1e-15);
        // Perfect predictions.
        let perfect = Tensor::new(vec![2, 3], vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let a = MatchAssignment {
            pairs: vec![(0, 0)],
            total_cost: 0.0,
        };
        assert_eq!(classification_loss(&perfect, &a, &[1], 0.1).unwrap(), 0.0);
        // Uniform predictions: every term is ln(K+1), so the weighted mean is too.
        let uniform = Tensor::full(vec![5, 4], 0.25);
        let l = classification_loss(&uniform, &a, &[2], 0.1).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_single_match_costs_minus_cls_weight() {
        let mask = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let gt = GroundTruthSegment::new(mask.clone(), 1, true).unwrap();
        let pred = SegmentPrediction {
            masks: mask.reshape(vec![1, 2, 2]).unwrap(),
            class_dists: Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap(),
        };
        let c = match_cost_matrix(&pred, &[gt], &LossWeights::default()).unwrap();
        assert!((c.item() + 2.0).abs() < 1e-9);
    }

    #[test]
    fn too_many_segments_is_data_error() {
        let mask = Tensor::ones(vec![1, 1]);
        let gts = vec![GroundTruthSegment::new(mask.clone(), 0, true).unwrap(); 2];
        let pred = SegmentPrediction {
            masks: Tensor::full(vec![1, 1, 1], 0.5),
            class_dists: Tensor::full(vec![1, 2], 0.5),
        };
        assert!(matches!(
            match_cost_matrix(&pred, &gts, &LossWeights::default()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn gt_validation() {
        assert!(GroundTruthSegment::new(Tensor::zeros(vec![2, 2]), 0, false).is_err());
        assert!(GroundTruthSegment::new(Tensor::full(vec![2, 2], 0.5), 0, false).is_err());
    }
}
