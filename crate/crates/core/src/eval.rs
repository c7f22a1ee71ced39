//! Detection metrics: PASCAL-style greedy matching, 11-point (or all-point)
//! interpolated AP, AP averaged over IoU thresholds 0.50:0.05:1.00,
//! class-agnostic proposal recall and the IoU-imbalance statistics.
//!
//! Ground truth flagged `difficult` is excluded from AP denominators; a
//! detection that can only be explained by a difficult object is neither a
//! true nor a false positive.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cascade::{bin_index, validate_edges};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::proposals::Proposal;
use crate::synth::{Annotation, ClassId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Index of the scene in the evaluated corpus.
    pub scene: usize,
    pub class_id: ClassId,
    pub bbox: BBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MatchOutcome {
    Tp { gt: usize, iou: f64 },
    Fp,
    Ignored { gt: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneMatch {
    /// Aligned with the input detections.
    pub outcomes: Vec<MatchOutcome>,
    pub gt_matched: Vec<bool>,
}

/// Indices of `scores` sorted by descending score, lower index first on ties.
fn ranking(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let s: Vec<f64> = scores.collect();
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    order
}

/// Greedy matching within one scene. Detections are visited by descending
/// confidence (input order on ties); each takes the highest-IoU still
/// unmatched same-class ground truth with IoU >= `iou_thresh` (lowest index on
/// ties) and becomes a true positive, otherwise a false positive.
pub fn match_detections(dets: &[Detection], gts: &[Annotation], iou_thresh: f64) -> SceneMatch {
    let mut gt_matched = vec![false; gts.len()];
    let mut outcomes = vec![MatchOutcome::Fp; dets.len()];
    for di in ranking(dets.iter().map(|d| d.confidence)) {
        let d = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        let mut difficult: Option<usize> = None;
        for (gi, g) in gts.iter().enumerate() {
            if g.class_id != d.class_id {
                continue;
            }
            let v = iou(&d.bbox, &g.bbox);
            if v < iou_thresh || (iou_thresh <= 0.0 && v <= 0.0) {
                continue;
            }
            if g.difficult {
                difficult.get_or_insert(gi);
                continue;
            }
            if gt_matched[gi] {
                continue;
            }
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        outcomes[di] = match (best, difficult) {
            (Some((gi, v)), _) => {
                gt_matched[gi] = true;
                MatchOutcome::Tp { gt: gi, iou: v }
            }
            (None, Some(gi)) => MatchOutcome::Ignored { gt: gi },
            (None, None) => MatchOutcome::Fp,
        };
    }
    SceneMatch { outcomes, gt_matched }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ApMethod {
    /// VOC2007: mean interpolated precision at recall 0, 0.1, ..., 1.
    #[default]
    ElevenPoint,
    /// VOC2010+: area under the monotone precision envelope.
    AllPoint,
}

/// Ground truth of a corpus, indexed by scene.
pub type GroundTruth = [Vec<Annotation>];

/// Ranked true/false positive flags for one class across the corpus, plus the
/// number of non-difficult ground truths.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCurve {
    pub hits: Vec<bool>,
    pub positives: usize,
}

/// One trace record: detection `detection` (input index) at threshold
/// `threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub threshold: f64,
    pub detection: usize,
    #[serde(flatten)]
    pub outcome: MatchOutcome,
}

/// Matches every scene at `iou_thresh` and returns the outcome of every
/// detection, aligned with `dets`.
pub fn match_corpus(dets: &[Detection], gts: &GroundTruth, iou_thresh: f64) -> Result<Vec<MatchOutcome>> {
    let mut by_scene: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        if d.scene >= gts.len() {
            return Err(Error::Reference(format!(
                "detection {i} refers to unknown scene {}",
                d.scene
            )));
        }
        by_scene.entry(d.scene).or_default().push(i);
    }
    let mut out = vec![MatchOutcome::Fp; dets.len()];
    for (scene, idx) in by_scene {
        let local: Vec<Detection> = idx.iter().map(|&i| dets[i]).collect();
        let m = match_detections(&local, &gts[scene], iou_thresh);
        for (o, &i) in m.outcomes.into_iter().zip(&idx) {
            out[i] = o;
        }
    }
    Ok(out)
}

fn class_curve(dets: &[Detection], outcomes: &[MatchOutcome], gts: &GroundTruth, class: ClassId) -> ClassCurve {
    let idx: Vec<usize> = (0..dets.len())
        .filter(|&i| dets[i].class_id == class && !matches!(outcomes[i], MatchOutcome::Ignored { .. }))
        .collect();
    let order = ranking(idx.iter().map(|&i| dets[i].confidence));
    ClassCurve {
        hits: order
            .into_iter()
            .map(|k| matches!(outcomes[idx[k]], MatchOutcome::Tp { .. }))
            .collect(),
        positives: gts
            .iter()
            .flatten()
            .filter(|g| g.class_id == class && !g.difficult)
            .count(),
    }
}

/// AP of a ranked hit list. `None` when the class has no ground truth.
pub fn ap_from_curve(curve: &ClassCurve, method: ApMethod) -> Option<f64> {
    if curve.positives == 0 {
        return None;
    }
    let npos = curve.positives as f64;
    let mut tp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(curve.hits.len());
    for (k, &hit) in curve.hits.iter().enumerate() {
        if hit {
            tp += 1;
        }
        points.push((tp as f64 / npos, tp as f64 / (k + 1) as f64));
    }
    Some(match method {
        ApMethod::ElevenPoint => {
            (0..=10)
                .map(|i| {
                    let r = i as f64 / 10.0;
                    points
                        .iter()
                        .filter(|(rec, _)| *rec >= r)
                        .map(|(_, p)| *p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
        ApMethod::AllPoint => {
            let mut envelope: Vec<f64> = points.iter().map(|p| p.1).collect();
            for i in (0..envelope.len().saturating_sub(1)).rev() {
                envelope[i] = envelope[i].max(envelope[i + 1]);
            }
            let mut prev_r = 0.0;
            let mut area = 0.0;
            for ((r, _), p) in points.iter().zip(&envelope) {
                if *r > prev_r {
                    area += (r - prev_r) * p;
                    prev_r = *r;
                }
            }
            area
        }
    })
}

/// Interpolated AP of `class` at one IoU threshold. `None` when the class has
/// no non-difficult ground truth.
pub fn ap_11point(dets: &[Detection], gts: &GroundTruth, class: ClassId, iou_thresh: f64) -> Result<Option<f64>> {
    let outcomes = match_corpus(dets, gts, iou_thresh)?;
    Ok(ap_from_curve(
        &class_curve(dets, &outcomes, gts, class),
        ApMethod::ElevenPoint,
    ))
}

/// The IoU thresholds 0.50, 0.55, ..., 1.00.
pub fn range_thresholds() -> Vec<f64> {
    (0..=10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Mean AP over `classes` that have ground truth (absent classes skipped).
fn mean_ap(
    dets: &[Detection],
    gts: &GroundTruth,
    classes: &[ClassId],
    thresh: f64,
    method: ApMethod,
) -> Result<Option<f64>> {
    let outcomes = match_corpus(dets, gts, thresh)?;
    let aps: Vec<f64> = classes
        .iter()
        .filter_map(|&c| ap_from_curve(&class_curve(dets, &outcomes, gts, c), method))
        .collect();
    Ok((!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64))
}

/// Class-averaged 11-point AP averaged again over [`range_thresholds`].
pub fn map_range(dets: &[Detection], gts: &GroundTruth, classes: &[ClassId]) -> Result<Option<f64>> {
    let per: Vec<Option<f64>> = range_thresholds()
        .into_iter()
        .map(|t| mean_ap(dets, gts, classes, t, ApMethod::ElevenPoint))
        .collect::<Result<_>>()?;
    if per.iter().any(Option::is_none) {
        return Ok(None);
    }
    Ok(Some(per.iter().flatten().sum::<f64>() / per.len() as f64))
}

/// Fraction of ground-truth boxes covered (IoU >= `iou_thresh`, class
/// agnostic) by the `k` highest-objectness proposals of their scene.
pub fn recall_at_k(proposals: &[Vec<Proposal>], gts: &[Vec<BBox>], iou_thresh: f64, k: usize) -> Result<f64> {
    if proposals.len() != gts.len() {
        return Err(Error::DimensionMismatch {
            expected: gts.len(),
            got: proposals.len(),
        });
    }
    if k == 0 {
        return Err(Error::Config("recall k must be at least 1".into()));
    }
    let total: usize = gts.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::NoGroundTruth);
    }
    let mut covered = 0usize;
    for (props, g) in proposals.iter().zip(gts) {
        let top: Vec<BBox> = ranking(props.iter().map(|p| p.objectness))
            .into_iter()
            .take(k)
            .map(|i| props[i].bbox)
            .collect();
        covered += g
            .iter()
            .filter(|gt| top.iter().any(|b| iou(b, gt) >= iou_thresh))
            .count();
    }
    Ok(covered as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub iou: f64,
    pub method: ApMethod,
    pub range: bool,
    pub recall_k: usize,
    pub recall_iou: f64,
    pub trace: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            iou: 0.5,
            method: ApMethod::ElevenPoint,
            range: true,
            recall_k: 100,
            recall_iou: 0.5,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: ClassId,
    pub name: String,
    pub positives: usize,
    /// AP at the primary threshold; absent when the class has no ground truth.
    pub ap: Option<f64>,
    /// AP per range threshold when range evaluation is enabled.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ap_range: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou: f64,
    pub method: ApMethod,
    pub per_class: Vec<ClassAp>,
    /// Mean AP at `iou` over classes with ground truth.
    pub map: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub range_thresholds: Vec<f64>,
    /// Class-averaged AP at each range threshold.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub map_per_threshold: Vec<Option<f64>>,
    pub map_range: Option<f64>,
    pub recall_k: Option<usize>,
    pub recall: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<TraceEntry>,
}

impl EvalReport {
    /// Mean AP at the primary threshold over the given subset of classes.
    pub fn subset_map(&self, classes: &[ClassId]) -> Option<f64> {
        mean_of(
            self.per_class
                .iter()
                .filter(|c| classes.contains(&c.class_id))
                .filter_map(|c| c.ap),
        )
    }

    /// Range AP (mean over thresholds of class means) over a subset of classes.
    pub fn subset_map_range(&self, classes: &[ClassId]) -> Option<f64> {
        let chosen: Vec<&ClassAp> = self
            .per_class
            .iter()
            .filter(|c| classes.contains(&c.class_id))
            .collect();
        let n = self.range_thresholds.len();
        if n == 0 {
            return None;
        }
        let per: Vec<Option<f64>> = (0..n)
            .map(|t| mean_of(chosen.iter().filter_map(|c| c.ap_range.get(t).copied().flatten())))
            .collect();
        if per.iter().any(Option::is_none) {
            return None;
        }
        Some(per.iter().flatten().sum::<f64>() / n as f64)
    }

    /// Plain-text per-class table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<20} {:>6} {:>8} {:>8}", "class", "gt", "AP", "AP[.5:1]");
        for c in &self.per_class {
            let range = mean_of(c.ap_range.iter().copied().flatten());
            let _ = writeln!(
                s,
                "{:<20} {:>6} {:>8} {:>8}",
                c.name,
                c.positives,
                fmt_opt(c.ap),
                if c.ap_range.is_empty() {
                    "-".into()
                } else {
                    fmt_opt(range)
                }
            );
        }
        let _ = writeln!(s, "mAP@{:.2}: {}", self.iou, fmt_opt(self.map));
        if !self.range_thresholds.is_empty() {
            let _ = writeln!(s, "mAP[.50:1.00]: {}", fmt_opt(self.map_range));
        }
        if let Some(k) = self.recall_k {
            let _ = writeln!(s, "recall@{k}: {}", fmt_opt(self.recall));
        }
        s
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".into(), |v| format!("{:.4}", v))
}

fn mean_of(it: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = it.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Scores detections against a corpus. `class_names[c]` names class `c`;
/// `proposals`, when given, feed the recall metric.
pub fn evaluate(
    dets: &[Detection],
    gts: &GroundTruth,
    classes: &[ClassId],
    class_names: &dyn Fn(ClassId) -> String,
    proposals: Option<&[Vec<Proposal>]>,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let primary = match_corpus(dets, gts, settings.iou)?;
    let mut per_class: Vec<ClassAp> = classes
        .iter()
        .map(|&c| {
            let curve = class_curve(dets, &primary, gts, c);
            ClassAp {
                class_id: c,
                name: class_names(c),
                positives: curve.positives,
                ap: ap_from_curve(&curve, settings.method),
                ap_range: Vec::new(),
            }
        })
        .collect();
    let mut trace = Vec::new();
    if settings.trace {
        trace.extend(primary.iter().enumerate().map(|(i, &o)| TraceEntry {
            threshold: settings.iou,
            detection: i,
            outcome: o,
        }));
    }
    let map = mean_of(per_class.iter().filter_map(|c| c.ap));

    let (mut thresholds, mut per_thr, mut map_range) = (Vec::new(), Vec::new(), None);
    if settings.range {
        thresholds = range_thresholds();
        for &t in &thresholds {
            let outcomes = match_corpus(dets, gts, t)?;
            if settings.trace && t != settings.iou {
                trace.extend(outcomes.iter().enumerate().map(|(i, &o)| TraceEntry {
                    threshold: t,
                    detection: i,
                    outcome: o,
                }));
            }
            for c in per_class.iter_mut() {
                let curve = class_curve(dets, &outcomes, gts, c.class_id);
                c.ap_range.push(ap_from_curve(&curve, ApMethod::ElevenPoint));
            }
            per_thr.push(mean_of(per_class.iter().filter_map(|c| *c.ap_range.last().unwrap())));
        }
        if per_thr.iter().all(Option::is_some) {
            map_range = Some(per_thr.iter().flatten().sum::<f64>() / per_thr.len() as f64);
        }
    }

    let recall = match proposals {
        Some(props) => {
            let boxes: Vec<Vec<BBox>> = gts
                .iter()
                .map(|g| {
                    g.iter()
                        .filter(|a| !a.difficult && classes.contains(&a.class_id))
                        .map(|a| a.bbox)
                        .collect()
                })
                .collect();
            recall_at_k(props, &boxes, settings.recall_iou, settings.recall_k).ok()
        }
        None => None,
    };

    Ok(EvalReport {
        iou: settings.iou,
        method: settings.method,
        per_class,
        map,
        range_thresholds: thresholds,
        map_per_threshold: per_thr,
        map_range,
        recall_k: proposals.map(|_| settings.recall_k),
        recall,
        trace,
    })
}

/// Histogram edges 0.4, 0.5, ..., 1.0 used for proposal-imbalance analysis.
pub fn imbalance_edges() -> Vec<f64> {
    (4..=10).map(|i| i as f64 / 10.0).collect()
}

/// IoUs of the positive proposals of one run, with the number of images they
/// came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceRun {
    pub ious: Vec<f64>,
    pub images: usize,
}

impl ImbalanceRun {
    pub fn from_proposals(per_image: &[Vec<Proposal>]) -> Self {
        ImbalanceRun {
            ious: per_image.iter().flatten().map(|p| p.max_gt_iou).collect(),
            images: per_image.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceStats {
    /// Share of counted proposals with IoU in [0.4, 0.6).
    pub share_04_06: Option<f64>,
    /// Count in the top bin divided by count in the bottom bin.
    pub high_low_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceReport {
    pub edges: Vec<f64>,
    pub base_per_image: Vec<f64>,
    pub novel_per_image: Vec<f64>,
    pub base: ImbalanceStats,
    pub novel: ImbalanceStats,
    /// Novel over base per-image count of proposals with IoU >= 0.5.
    pub novel_base_ratio_ge_05: Option<f64>,
}

fn per_image_hist(run: &ImbalanceRun, edges: &[f64]) -> Vec<f64> {
    let mut counts = vec![0usize; edges.len() - 1];
    for &v in &run.ious {
        if v >= edges[0] {
            if let Some(b) = bin_index(edges, v) {
                counts[b] += 1;
            }
        }
    }
    let n = run.images.max(1) as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

fn ratio(a: f64, b: f64) -> Option<f64> {
    (b > 0.0).then(|| a / b)
}

fn stats(hist: &[f64], edges: &[f64]) -> ImbalanceStats {
    let total: f64 = hist.iter().sum();
    let low: f64 = hist
        .iter()
        .zip(edges)
        .filter(|(_, &lo)| lo < 0.6 - 1e-12)
        .map(|(c, _)| c)
        .sum();
    ImbalanceStats {
        share_04_06: ratio(low, total),
        high_low_ratio: ratio(*hist.last().unwrap_or(&0.0), *hist.first().unwrap_or(&0.0)),
    }
}

/// Paired per-image IoU histograms of positive proposals for a base run and
/// a novel run. `edges` must start at 0.4 and end at 1.0.
pub fn imbalance_report(base: &ImbalanceRun, novel: &ImbalanceRun, edges: &[f64]) -> Result<ImbalanceReport> {
    validate_edges(edges, 0.4)?;
    if edges[0] != 0.4 {
        return Err(Error::Config("imbalance edges must start at 0.4".into()));
    }
    let b = per_image_hist(base, edges);
    let n = per_image_hist(novel, edges);
    let ge05 = |h: &[f64]| -> f64 {
        h.iter()
            .zip(edges)
            .filter(|(_, &lo)| lo >= 0.5 - 1e-12)
            .map(|(c, _)| c)
            .sum()
    };
    Ok(ImbalanceReport {
        base: stats(&b, edges),
        novel: stats(&n, edges),
        novel_base_ratio_ge_05: ratio(ge05(&n), ge05(&b)),
        edges: edges.to_vec(),
        base_per_image: b,
        novel_per_image: n,
    })
}

impl ImbalanceReport {
    /// CSV with columns `bin_lo,bin_hi,base_per_image,novel_per_image`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,base_per_image,novel_per_image\n");
        for i in 0..self.base_per_image.len() {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                self.edges[i],
                self.edges[i + 1],
                self.base_per_image[i],
                self.novel_per_image[i]
            );
        }
        s
    }
}
