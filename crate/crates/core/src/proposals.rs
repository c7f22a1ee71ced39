//! Anchors, anchor matching, the RPN head and proposal generation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clip, decode_delta, encode_delta, iou, BBox, BoxDelta};
use crate::linear::Linear;
use crate::loss::{bce_with_logit, sigmoid, smooth_l1, smooth_l1_grad};
use crate::rng::LabRng;
use crate::synth::Scene;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorGrid {
    pub width: f64,
    pub height: f64,
    pub stride: f64,
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
    pub anchors: Vec<BBox>,
}

/// Tiles anchors at every `stride` step, ordered row-major, then by scale,
/// then by ratio. A ratio `r` is width/height at constant area `s * s`.
pub fn build_anchor_grid(width: f64, height: f64, stride: f64, scales: &[f64], ratios: &[f64]) -> Result<AnchorGrid> {
    if !(stride > 0.0 && width > 0.0 && height > 0.0) {
        return Err(Error::Config("anchor grid needs positive stride and scene size".into()));
    }
    if scales.is_empty() || ratios.is_empty() {
        return Err(Error::Config("anchor scales and ratios must be non-empty".into()));
    }
    if scales.iter().chain(ratios).any(|v| !(*v > 0.0)) {
        return Err(Error::Config("anchor scales and ratios must be positive".into()));
    }
    let cols = ((width / stride).floor() as usize).max(1);
    let rows = ((height / stride).floor() as usize).max(1);
    let mut anchors = Vec::with_capacity(rows * cols * scales.len() * ratios.len());
    for r in 0..rows {
        let cy = (r as f64 + 0.5) * stride;
        for c in 0..cols {
            let cx = (c as f64 + 0.5) * stride;
            for &s in scales {
                for &ratio in ratios {
                    let q = ratio.sqrt();
                    let a = BBox::from_center(cx, cy, s * q, s / q);
                    anchors.push(clip(&a, width, height));
                }
            }
        }
    }
    Ok(AnchorGrid {
        width,
        height,
        stride,
        scales: scales.to_vec(),
        ratios: ratios.to_vec(),
        anchors,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorLabel {
    Positive(usize),
    Negative,
    Ignore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorMatch {
    pub labels: Vec<AnchorLabel>,
    /// Regression target for every positive anchor, `None` elsewhere.
    pub targets: Vec<Option<BoxDelta>>,
}

impl AnchorMatch {
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, AnchorLabel::Positive(_)))
            .map(|(i, _)| i)
    }

    pub fn negatives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == AnchorLabel::Negative)
            .map(|(i, _)| i)
    }
}

/// Faster R-CNN style matching. An anchor is positive when its best IoU
/// reaches `pos_thresh`, negative below `neg_thresh`, ignored in between.
/// Additionally, for each ground truth the anchor with the highest IoU
/// (lowest index on ties) is forced positive for that ground truth, provided
/// the IoU is non-zero and no earlier ground truth forced the same anchor.
pub fn match_anchors(anchors: &[BBox], scene: &Scene, pos_thresh: f64, neg_thresh: f64) -> AnchorMatch {
    let gts = scene.gt_boxes();
    let mut labels = vec![AnchorLabel::Negative; anchors.len()];
    if gts.is_empty() {
        return AnchorMatch {
            targets: vec![None; anchors.len()],
            labels,
        };
    }
    let mut best_anchor: Vec<(usize, f64)> = vec![(usize::MAX, 0.0); gts.len()];
    for (ai, a) in anchors.iter().enumerate() {
        let mut best = (0usize, f64::NEG_INFINITY);
        for (gi, g) in gts.iter().enumerate() {
            let v = iou(a, g);
            if v > best.1 {
                best = (gi, v);
            }
            if v > best_anchor[gi].1 {
                best_anchor[gi] = (ai, v);
            }
        }
        labels[ai] = if best.1 >= pos_thresh {
            AnchorLabel::Positive(best.0)
        } else if best.1 < neg_thresh {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignore
        };
    }
    let mut forced = vec![false; anchors.len()];
    for (gi, &(ai, v)) in best_anchor.iter().enumerate() {
        if v > 0.0 && !forced[ai] {
            forced[ai] = true;
            labels[ai] = AnchorLabel::Positive(gi);
        }
    }
    let targets = labels
        .iter()
        .zip(anchors)
        .map(|(l, a)| match l {
            AnchorLabel::Positive(gi) => encode_delta(a, &gts[*gi]).ok(),
            _ => None,
        })
        .collect();
    AnchorMatch { labels, targets }
}

/// Picks up to `batch_size` anchors with at most `positive_fraction` of them
/// positive; negatives fill the remainder.
pub fn sample_anchor_batch(m: &AnchorMatch, batch_size: usize, positive_fraction: f64, rng: &mut LabRng) -> Vec<usize> {
    let mut pos: Vec<usize> = m.positives().filter(|&i| m.targets[i].is_some()).collect();
    let mut neg: Vec<usize> = m.negatives().collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    let n_pos = pos.len().min((batch_size as f64 * positive_fraction).round() as usize);
    let n_neg = neg.len().min(batch_size - n_pos);
    let mut out: Vec<usize> = pos[..n_pos].iter().chain(&neg[..n_neg]).copied().collect();
    out.sort_unstable();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpnHead {
    pub objectness: Linear,
    pub regressor: Linear,
    /// IoU a proposal needs with a ground truth to be recorded as matched.
    pub alpha_rpn: f64,
    pub pos_thresh: f64,
    pub neg_thresh: f64,
}

impl RpnHead {
    pub fn new(feature_len: usize, pos_thresh: f64, neg_thresh: f64, alpha_rpn: f64) -> Result<Self> {
        if !(0.0 <= neg_thresh && neg_thresh < pos_thresh && pos_thresh <= 1.0) {
            return Err(Error::Config(format!(
                "RPN thresholds must satisfy 0 <= neg < pos <= 1 (got neg {neg_thresh}, pos {pos_thresh})"
            )));
        }
        Ok(RpnHead {
            objectness: Linear::zeros(1, feature_len),
            regressor: Linear::zeros(4, feature_len),
            alpha_rpn,
            pos_thresh,
            neg_thresh,
        })
    }

    pub fn feature_len(&self) -> usize {
        self.objectness.inputs
    }

    pub fn param_count(&self) -> usize {
        self.objectness.param_count() + self.regressor.param_count()
    }

    pub fn params(&self) -> Vec<f64> {
        self.objectness.params().chain(self.regressor.params()).collect()
    }

    pub fn param_mut(&mut self, i: usize) -> &mut f64 {
        let n = self.objectness.param_count();
        if i < n {
            self.objectness.param_mut(i)
        } else {
            self.regressor.param_mut(i - n)
        }
    }
}

fn check_dims(expected: usize, features: &[Vec<f64>]) -> Result<()> {
    match features.iter().find(|f| f.len() != expected) {
        Some(f) => Err(Error::DimensionMismatch { expected, got: f.len() }),
        None => Ok(()),
    }
}

/// Objectness probabilities and box deltas, one per feature row.
pub fn rpn_forward(head: &RpnHead, features: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<BoxDelta>)> {
    check_dims(head.feature_len(), features)?;
    Ok(features
        .iter()
        .map(|x| {
            let p = sigmoid(head.objectness.output(0, x));
            let d = BoxDelta::from_array([
                head.regressor.output(0, x),
                head.regressor.output(1, x),
                head.regressor.output(2, x),
                head.regressor.output(3, x),
            ]);
            (p, d)
        })
        .unzip())
}

/// Labelled anchors for one RPN update.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RpnBatch {
    pub features: Vec<Vec<f64>>,
    pub objectness: Vec<bool>,
    /// Present exactly for positives.
    pub targets: Vec<Option<BoxDelta>>,
}

impl RpnBatch {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn push(&mut self, feature: Vec<f64>, target: Option<BoxDelta>) {
        self.features.push(feature);
        self.objectness.push(target.is_some());
        self.targets.push(target);
    }

    pub fn extend(&mut self, other: RpnBatch) {
        self.features.extend(other.features);
        self.objectness.extend(other.objectness);
        self.targets.extend(other.targets);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RpnLoss {
    /// Mean binary cross-entropy over the batch.
    pub cls: f64,
    /// Smooth-L1 over positive deltas, normalised by batch size.
    pub reg: f64,
    pub gamma: f64,
}

impl RpnLoss {
    pub fn total(&self) -> f64 {
        self.gamma * (self.cls + self.reg)
    }
}

/// Unscaled loss and its gradient with respect to every head parameter.
pub fn rpn_loss_and_grad(head: &RpnHead, batch: &RpnBatch) -> Result<(RpnLoss, RpnHead)> {
    check_dims(head.feature_len(), &batch.features)?;
    let mut grad = RpnHead {
        objectness: Linear::zeros(1, head.feature_len()),
        regressor: Linear::zeros(4, head.feature_len()),
        ..head.clone()
    };
    let mut loss = RpnLoss {
        gamma: 1.0,
        ..RpnLoss::default()
    };
    if batch.is_empty() {
        return Ok((loss, grad));
    }
    let n = batch.len() as f64;
    for ((x, &y), t) in batch.features.iter().zip(&batch.objectness).zip(&batch.targets) {
        let z = head.objectness.output(0, x);
        let y = if y { 1.0 } else { 0.0 };
        loss.cls += bce_with_logit(z, y);
        grad.objectness.accumulate(0, (sigmoid(z) - y) / n, x);
        if let Some(t) = t {
            for (j, tj) in t.to_array().iter().enumerate() {
                let r = head.regressor.output(j, x) - tj;
                loss.reg += smooth_l1(r);
                grad.regressor.accumulate(j, smooth_l1_grad(r) / n, x);
            }
        }
    }
    loss.cls /= n;
    loss.reg /= n;
    Ok((loss, grad))
}

/// One SGD step on `gamma * (L_cls + L_reg)`. The update is
/// `-(lr * gamma) * grad`, so `(lr, gamma)` and `(lr * gamma, 1)` coincide
/// exactly, and `gamma == 0` leaves the head bitwise unchanged.
/// The returned loss is evaluated before the update.
pub fn rpn_step(head: &RpnHead, batch: &RpnBatch, lr: f64, gamma: f64) -> Result<(RpnHead, RpnLoss)> {
    rpn_step_scaled(head, batch, lr, gamma, 1.0)
}

/// [`rpn_step`] with the regression branch updated at `(lr * gamma) * reg_lr_scale`.
pub fn rpn_step_scaled(
    head: &RpnHead,
    batch: &RpnBatch,
    lr: f64,
    gamma: f64,
    reg_lr_scale: f64,
) -> Result<(RpnHead, RpnLoss)> {
    if batch.is_empty() {
        return Ok((
            head.clone(),
            RpnLoss {
                gamma,
                ..RpnLoss::default()
            },
        ));
    }
    let (mut loss, grad) = rpn_loss_and_grad(head, batch)?;
    loss.gamma = gamma;
    let scale = lr * gamma;
    let mut next = head.clone();
    next.objectness.descend(&grad.objectness, scale);
    next.regressor.descend(&grad.regressor, scale * reg_lr_scale);
    Ok((next, loss))
}

/// Greedy NMS: repeatedly keep the highest-scoring remaining box (lower index
/// on ties) and drop every box with IoU above `thresh` to it.
pub fn nms(boxes: &[BBox], scores: &[f64], thresh: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "boxes and scores must align");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&boxes[i], &boxes[j]) > thresh {
                suppressed[j] = true;
            }
        }
    }
    keep
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
    pub max_gt_iou: f64,
    pub matched_gt: Option<usize>,
    /// 0 for RPN output, `t` after refinement by cascade stage `t`.
    pub source_stage: usize,
}

impl Proposal {
    /// Fills `max_gt_iou` / `matched_gt` against `gts`; a proposal is matched
    /// when its best IoU reaches `alpha`.
    pub fn annotate(&mut self, gts: &[BBox], alpha: f64) {
        let mut best: Option<(usize, f64)> = None;
        for (i, g) in gts.iter().enumerate() {
            let v = iou(&self.bbox, g);
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((i, v));
            }
        }
        self.max_gt_iou = best.map_or(0.0, |b| b.1);
        self.matched_gt = best.filter(|&(_, v)| v > 0.0 && v >= alpha).map(|b| b.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalConfig {
    pub nms_thresh: f64,
    pub pre_nms_topk: usize,
    pub post_nms_count: usize,
    pub doubled: bool,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            nms_thresh: 0.7,
            pre_nms_topk: 600,
            post_nms_count: 100,
            doubled: false,
        }
    }
}

impl ProposalConfig {
    pub fn output_limit(&self) -> usize {
        self.post_nms_count * if self.doubled { 2 } else { 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pre_nms_topk == 0 || self.post_nms_count == 0 {
            return Err(Error::Config("proposal counts must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.nms_thresh) {
            return Err(Error::Config("proposal nms_thresh must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Scores and regresses every anchor, keeps the `pre_nms_topk` best by
/// objectness, suppresses duplicates and returns at most
/// `post_nms_count` (twice that when `doubled`) proposals sorted by
/// descending objectness. `gts` only feeds the analysis metadata.
pub fn generate_proposals(
    head: &RpnHead,
    grid: &AnchorGrid,
    features: &[Vec<f64>],
    gts: &[BBox],
    cfg: &ProposalConfig,
) -> Result<Vec<Proposal>> {
    if features.len() != grid.anchors.len() {
        return Err(Error::DimensionMismatch {
            expected: grid.anchors.len(),
            got: features.len(),
        });
    }
    let (scores, deltas) = rpn_forward(head, features)?;
    let mut cand: Vec<(BBox, f64)> = grid
        .anchors
        .iter()
        .zip(&deltas)
        .zip(&scores)
        .map(|((a, d), &s)| (clip(&decode_delta(a, d), grid.width, grid.height), s))
        .filter(|(b, _)| b.width() > 0.0 && b.height() > 0.0)
        .collect();
    // stable: equal scores keep anchor order
    cand.sort_by(|a, b| b.1.total_cmp(&a.1));
    cand.truncate(cfg.pre_nms_topk);
    let boxes: Vec<BBox> = cand.iter().map(|c| c.0).collect();
    let cand_scores: Vec<f64> = cand.iter().map(|c| c.1).collect();
    let keep = nms(&boxes, &cand_scores, cfg.nms_thresh);
    Ok(keep
        .into_iter()
        .take(cfg.output_limit())
        .map(|i| {
            let mut p = Proposal {
                bbox: boxes[i],
                objectness: cand_scores[i],
                max_gt_iou: 0.0,
                matched_gt: None,
                source_stage: 0,
            };
            p.annotate(gts, head.alpha_rpn);
            p
        })
        .collect())
}
