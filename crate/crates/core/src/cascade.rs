//! Sequential proposal refinement.
//!
//! Stage `t` owns a softmax classifier over background plus the detector's
//! classes and a class-agnostic box regressor, both trained on proposals
//! labelled at IoU threshold `alpha_t` and weighted by `lambda_t` in the total
//! loss. At inference each stage re-extracts features at the boxes produced by
//! the previous stage, so the regressions compose as `g_T(...g_1(p))`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clip, decode_delta, encode_delta, BBox, BoxDelta};
use crate::linear::Linear;
use crate::loss::{cross_entropy, smooth_l1, smooth_l1_grad, softmax};
use crate::proposals::{nms, Proposal};
use crate::synth::{ClassId, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub alpha: f64,
    pub lambda: f64,
}

impl StageConfig {
    /// Three stages at IoU 0.5 / 0.6 / 0.7 weighted 1 / 0.5 / 0.25.
    pub fn default_cascade() -> Vec<StageConfig> {
        vec![
            StageConfig {
                alpha: 0.5,
                lambda: 1.0,
            },
            StageConfig {
                alpha: 0.6,
                lambda: 0.5,
            },
            StageConfig {
                alpha: 0.7,
                lambda: 0.25,
            },
        ]
    }

    /// Single Faster R-CNN style head.
    pub fn single_stage() -> Vec<StageConfig> {
        vec![StageConfig {
            alpha: 0.5,
            lambda: 1.0,
        }]
    }

    pub fn validate_sequence(stages: &[StageConfig]) -> Result<()> {
        if stages.is_empty() {
            return Err(Error::Config("a cascade needs at least one stage".into()));
        }
        for s in stages {
            if !(0.0..=1.0).contains(&s.alpha) {
                return Err(Error::Config(format!("stage alpha {} outside [0, 1]", s.alpha)));
            }
            if !(s.lambda > 0.0 && s.lambda.is_finite()) {
                return Err(Error::Config(format!("stage lambda {} must be positive", s.lambda)));
            }
        }
        if stages.windows(2).any(|w| w[1].alpha <= w[0].alpha) {
            return Err(Error::Config("stage alphas must strictly increase".into()));
        }
        Ok(())
    }
}

/// Classifier `l_t` (row 0 is background, row `k + 1` is `classes[k]`) and
/// class-agnostic regressor `g_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageHead {
    pub classes: Vec<ClassId>,
    pub classifier: Linear,
    pub regressor: Linear,
}

impl StageHead {
    pub fn new(classes: Vec<ClassId>, feature_len: usize) -> Self {
        StageHead {
            classifier: Linear::zeros(classes.len() + 1, feature_len),
            regressor: Linear::zeros(4, feature_len),
            classes,
        }
    }

    pub fn feature_len(&self) -> usize {
        self.classifier.inputs
    }

    /// Classifier row of `class`, if the head knows it.
    pub fn row_of(&self, class: ClassId) -> Option<usize> {
        self.classes.iter().position(|&c| c == class).map(|i| i + 1)
    }

    /// Appends zero-initialised classifier rows for `extra` classes. Logits of
    /// the existing classes are unchanged.
    pub fn widen(&mut self, extra: &[ClassId]) {
        let new: Vec<ClassId> = extra.iter().copied().filter(|c| !self.classes.contains(c)).collect();
        self.classifier.add_rows(new.len());
        self.classes.extend(new);
    }

    pub fn predict_delta(&self, x: &[f64]) -> BoxDelta {
        BoxDelta::from_array([
            self.regressor.output(0, x),
            self.regressor.output(1, x),
            self.regressor.output(2, x),
            self.regressor.output(3, x),
        ])
    }

    pub fn class_probs(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.classifier.forward(x))
    }

    pub fn param_count(&self) -> usize {
        self.classifier.param_count() + self.regressor.param_count()
    }

    pub fn params(&self) -> Vec<f64> {
        self.classifier.params().chain(self.regressor.params()).collect()
    }

    pub fn param_mut(&mut self, i: usize) -> &mut f64 {
        let n = self.classifier.param_count();
        if i < n {
            self.classifier.param_mut(i)
        } else {
            self.regressor.param_mut(i - n)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub config: StageConfig,
    pub head: StageHead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cascade {
    pub stages: Vec<Stage>,
}

impl Cascade {
    pub fn new(configs: &[StageConfig], classes: Vec<ClassId>, feature_len: usize) -> Result<Self> {
        StageConfig::validate_sequence(configs)?;
        Ok(Cascade {
            stages: configs
                .iter()
                .map(|&config| Stage {
                    config,
                    head: StageHead::new(classes.clone(), feature_len),
                })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn widen(&mut self, extra: &[ClassId]) {
        for s in &mut self.stages {
            s.head.widen(extra);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageLabel {
    /// `None` for background.
    pub class: Option<ClassId>,
    pub gt: Option<usize>,
    pub iou: f64,
    pub target: Option<BoxDelta>,
}

/// Labels each proposal with the class of its best-overlapping ground truth
/// (lowest index on ties) when that IoU reaches `alpha`, else background.
pub fn assign_stage_labels(proposals: &[Proposal], scene: &Scene, alpha: f64) -> Vec<StageLabel> {
    proposals
        .iter()
        .map(|p| {
            let best = scene.best_match(&p.bbox).filter(|&(_, v)| v > 0.0 && v >= alpha);
            let target = best.and_then(|(gi, _)| encode_delta(&p.bbox, &scene.annotations[gi].bbox).ok());
            match (best, target) {
                (Some((gi, v)), Some(t)) => StageLabel {
                    class: Some(scene.annotations[gi].class_id),
                    gt: Some(gi),
                    iou: v,
                    target: Some(t),
                },
                _ => StageLabel {
                    class: None,
                    gt: None,
                    iou: scene.best_match(&p.bbox).map_or(0.0, |b| b.1),
                    target: None,
                },
            }
        })
        .collect()
}

/// Training examples for one stage update.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageBatch {
    pub features: Vec<Vec<f64>>,
    /// Classifier row: 0 for background.
    pub rows: Vec<usize>,
    pub targets: Vec<Option<BoxDelta>>,
}

impl StageBatch {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Adds one example; foreground classes unknown to `head` count as
    /// background.
    pub fn push(&mut self, head: &StageHead, feature: Vec<f64>, label: &StageLabel) {
        let row = label.class.and_then(|c| head.row_of(c));
        self.features.push(feature);
        self.rows.push(row.unwrap_or(0));
        self.targets.push(if row.is_some() { label.target } else { None });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageLoss {
    /// Mean cross-entropy over the batch.
    pub cls: f64,
    /// Smooth-L1 over foreground deltas, normalised by batch size.
    pub reg: f64,
    pub lambda: f64,
}

impl StageLoss {
    pub fn weighted(&self) -> f64 {
        self.lambda * (self.cls + self.reg)
    }
}

/// Unweighted stage loss and its gradient.
pub fn stage_loss_and_grad(head: &StageHead, batch: &StageBatch) -> Result<(StageLoss, StageHead)> {
    let d = head.feature_len();
    if let Some(f) = batch.features.iter().find(|f| f.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: f.len(),
        });
    }
    let mut grad = StageHead::new(head.classes.clone(), d);
    let mut loss = StageLoss {
        lambda: 1.0,
        ..StageLoss::default()
    };
    if batch.is_empty() {
        return Ok((loss, grad));
    }
    let n = batch.len() as f64;
    for ((x, &row), t) in batch.features.iter().zip(&batch.rows).zip(&batch.targets) {
        let logits = head.classifier.forward(x);
        loss.cls += cross_entropy(&logits, row);
        let probs = softmax(&logits);
        for (k, p) in probs.iter().enumerate() {
            let y = if k == row { 1.0 } else { 0.0 };
            grad.classifier.accumulate(k, (p - y) / n, x);
        }
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

/// One SGD step on `lambda * (L_cls + L_reg)` with update
/// `-(lr * lambda) * grad`. Returns the pre-update loss.
pub fn stage_step(head: &StageHead, cfg: &StageConfig, batch: &StageBatch, lr: f64) -> Result<(StageHead, StageLoss)> {
    stage_step_scaled(head, cfg, batch, lr, 1.0)
}

/// [`stage_step`] with the regressor updated at `(lr * lambda) * reg_lr_scale`.
pub fn stage_step_scaled(
    head: &StageHead,
    cfg: &StageConfig,
    batch: &StageBatch,
    lr: f64,
    reg_lr_scale: f64,
) -> Result<(StageHead, StageLoss)> {
    if batch.is_empty() {
        return Ok((
            head.clone(),
            StageLoss {
                lambda: cfg.lambda,
                ..StageLoss::default()
            },
        ));
    }
    let (mut loss, grad) = stage_loss_and_grad(head, batch)?;
    loss.lambda = cfg.lambda;
    let scale = lr * cfg.lambda;
    let mut next = head.clone();
    next.classifier.descend(&grad.classifier, scale);
    next.regressor.descend(&grad.regressor, scale * reg_lr_scale);
    Ok((next, loss))
}

/// Refined proposals plus each proposal's class distribution (row 0 is
/// background) computed from the same features.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub proposals: Vec<Proposal>,
    pub class_probs: Vec<Vec<f64>>,
}

/// Applies stage `stage_index` (1-based) given features already extracted at
/// each proposal's current box.
pub fn refine_with_features(
    head: &StageHead,
    proposals: &[Proposal],
    features: &[Vec<f64>],
    scene: &Scene,
    stage_index: usize,
) -> StageOutput {
    let gts = scene.gt_boxes();
    let mut out = Vec::with_capacity(proposals.len());
    let mut class_probs = Vec::with_capacity(proposals.len());
    for (p, x) in proposals.iter().zip(features) {
        let probs = head.class_probs(x);
        let bbox = if p.bbox.width() > 0.0 && p.bbox.height() > 0.0 {
            clip(
                &decode_delta(&p.bbox, &head.predict_delta(x)),
                scene.width,
                scene.height,
            )
        } else {
            p.bbox
        };
        let mut q = Proposal {
            bbox,
            objectness: (1.0 - probs[0]).clamp(0.0, 1.0),
            max_gt_iou: 0.0,
            matched_gt: None,
            source_stage: stage_index,
        };
        q.annotate(&gts, 0.0);
        out.push(q);
        class_probs.push(probs);
    }
    StageOutput {
        proposals: out,
        class_probs,
    }
}

/// Re-extracts features at every proposal box and applies one stage.
/// Never drops proposals.
pub fn refine<F>(
    head: &StageHead,
    proposals: &[Proposal],
    mut feature_fn: F,
    scene: &Scene,
    stage_index: usize,
) -> StageOutput
where
    F: FnMut(&BBox) -> Vec<f64>,
{
    let features: Vec<Vec<f64>> = proposals.iter().map(|p| feature_fn(&p.bbox)).collect();
    refine_with_features(head, proposals, &features, scene, stage_index)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionConfig {
    pub score_floor: f64,
    pub nms_thresh: f64,
    pub max_per_scene: usize,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig {
            score_floor: 0.05,
            nms_thresh: 0.5,
            max_per_scene: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassDetection {
    pub class_id: ClassId,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeOutput {
    /// `snapshots[0]` is the input; `snapshots[t]` is the output of stage `t`.
    /// The proposals entering stage `t` are therefore `snapshots[t - 1]`.
    pub snapshots: Vec<Vec<Proposal>>,
    pub detections: Vec<ClassDetection>,
}

/// Runs every stage in order, then turns the last stage's boxes and class
/// distributions into per-class detections above the score floor, followed
/// by per-class NMS.
pub fn run_cascade<F>(
    cascade: &Cascade,
    proposals: &[Proposal],
    mut feature_fn: F,
    scene: &Scene,
    det_cfg: &DetectionConfig,
) -> CascadeOutput
where
    F: FnMut(&BBox) -> Vec<f64>,
{
    let mut snapshots = vec![proposals.to_vec()];
    let mut last_probs: Vec<Vec<f64>> = Vec::new();
    for (t, stage) in cascade.stages.iter().enumerate() {
        let current = snapshots.last().expect("non-empty");
        let out = refine(&stage.head, current, &mut feature_fn, scene, t + 1);
        snapshots.push(out.proposals);
        last_probs = out.class_probs;
    }
    let detections = match cascade.stages.last() {
        Some(last) => collect_detections(&last.head.classes, snapshots.last().unwrap(), &last_probs, det_cfg),
        None => Vec::new(),
    };
    CascadeOutput { snapshots, detections }
}

fn collect_detections(
    classes: &[ClassId],
    proposals: &[Proposal],
    probs: &[Vec<f64>],
    cfg: &DetectionConfig,
) -> Vec<ClassDetection> {
    let mut all = Vec::new();
    for (k, &class_id) in classes.iter().enumerate() {
        let cand: Vec<ClassDetection> = proposals
            .iter()
            .zip(probs)
            .filter(|(p, pr)| pr[k + 1] > cfg.score_floor && p.bbox.width() > 0.0 && p.bbox.height() > 0.0)
            .map(|(p, pr)| ClassDetection {
                class_id,
                score: pr[k + 1],
                bbox: p.bbox,
            })
            .collect();
        let boxes: Vec<BBox> = cand.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = cand.iter().map(|d| d.score).collect();
        all.extend(nms(&boxes, &scores, cfg.nms_thresh).into_iter().map(|i| cand[i]));
    }
    // stable: class order breaks score ties
    all.sort_by(|a, b| b.score.total_cmp(&a.score));
    all.truncate(cfg.max_per_scene);
    all
}

/// Histogram of `max_gt_iou` for one snapshot, restricted to proposals with
/// IoU of at least [`POSITIVE_IOU`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageHist {
    pub stage: usize,
    pub counts: Vec<usize>,
    pub total: usize,
    /// Fraction of counted proposals with IoU >= 0.75 (0 when none counted).
    pub share_ge_075: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageHistogram {
    pub edges: Vec<f64>,
    pub stages: Vec<StageHist>,
}

pub const POSITIVE_IOU: f64 = 0.4;
pub const HIGH_QUALITY_IOU: f64 = 0.75;

/// Ten bins of width 0.1 over `[0, 1]`.
pub fn default_edges() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// Index of the half-open bin `[edges[i], edges[i + 1])` containing `v`; the
/// last bin is closed on the right.
pub(crate) fn bin_index(edges: &[f64], v: f64) -> Option<usize> {
    let n = edges.len() - 1;
    if v < edges[0] || v > edges[n] {
        return None;
    }
    if v == edges[n] {
        return Some(n - 1);
    }
    (0..n).find(|&i| v >= edges[i] && v < edges[i + 1])
}

pub(crate) fn validate_edges(edges: &[f64], upper_of_first: f64) -> Result<()> {
    if edges.len() < 2 {
        return Err(Error::Config("histogram needs at least two edges".into()));
    }
    if edges.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Config("histogram edges must strictly increase".into()));
    }
    if !(edges[0] >= 0.0 && edges[0] <= upper_of_first && edges[edges.len() - 1] == 1.0) {
        return Err(Error::Config(format!(
            "histogram edges must start in [0, {upper_of_first}] and end at 1"
        )));
    }
    Ok(())
}

/// Per-snapshot IoU histograms. Stage labels follow snapshot indices, so
/// stage `t` holds the proposals entering cascade stage `t + 1`.
pub fn stage_iou_histogram(snapshots: &[Vec<Proposal>], edges: &[f64]) -> Result<StageHistogram> {
    validate_edges(edges, POSITIVE_IOU)?;
    let stages = snapshots
        .iter()
        .enumerate()
        .map(|(stage, props)| {
            let mut counts = vec![0usize; edges.len() - 1];
            let mut total = 0;
            let mut high = 0;
            for p in props.iter().filter(|p| p.max_gt_iou >= POSITIVE_IOU) {
                total += 1;
                if p.max_gt_iou >= HIGH_QUALITY_IOU {
                    high += 1;
                }
                if let Some(b) = bin_index(edges, p.max_gt_iou) {
                    counts[b] += 1;
                }
            }
            StageHist {
                stage,
                counts,
                total,
                share_ge_075: if total == 0 { 0.0 } else { high as f64 / total as f64 },
            }
        })
        .collect();
    Ok(StageHistogram {
        edges: edges.to_vec(),
        stages,
    })
}

impl StageHistogram {
    /// CSV with columns `stage,bin_lo,bin_hi,count,share_ge_075`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,bin_lo,bin_hi,count,share_ge_075\n");
        for st in &self.stages {
            for (i, c) in st.counts.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{}",
                    st.stage,
                    self.edges[i],
                    self.edges[i + 1],
                    c,
                    st.share_ge_075
                );
            }
        }
        s
    }

    /// Parses the output of [`StageHistogram::to_csv`].
    pub fn from_csv(text: &str) -> Result<StageHistogram> {
        let mut lines = text.lines();
        if lines.next() != Some("stage,bin_lo,bin_hi,count,share_ge_075") {
            return Err(Error::Schema("unexpected stage histogram header".into()));
        }
        let mut hist = StageHistogram {
            edges: Vec::new(),
            stages: Vec::new(),
        };
        for (ln, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Schema(format!("stage histogram line {}: {line:?}", ln + 2));
            if f.len() != 5 {
                return Err(bad());
            }
            let stage: usize = f[0].parse().map_err(|_| bad())?;
            let lo: f64 = f[1].parse().map_err(|_| bad())?;
            let hi: f64 = f[2].parse().map_err(|_| bad())?;
            let count: usize = f[3].parse().map_err(|_| bad())?;
            let share: f64 = f[4].parse().map_err(|_| bad())?;
            if hist.stages.last().is_none_or(|s| s.stage != stage) {
                hist.stages.push(StageHist {
                    stage,
                    counts: Vec::new(),
                    total: 0,
                    share_ge_075: share,
                });
            }
            if hist.stages.len() == 1 {
                if hist.edges.is_empty() {
                    hist.edges.push(lo);
                }
                hist.edges.push(hi);
            }
            let st = hist.stages.last_mut().unwrap();
            st.counts.push(count);
            st.total += count;
        }
        Ok(hist)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;
    use crate::rng::seeded;
    use crate::synth::Annotation;
    use rand::Rng;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn prop(b: BBox) -> Proposal {
        Proposal {
            bbox: b,
            objectness: 1.0,
            max_gt_iou: 0.0,
            matched_gt: None,
            source_stage: 0,
        }
    }

    fn scene_with(boxes: &[(ClassId, BBox)]) -> Scene {
        Scene {
            width: 200.0,
            height: 200.0,
            annotations: boxes.iter().map(|&(c, b)| Annotation::new(c, b)).collect(),
            unlabeled: Vec::new(),
        }
    }

    #[test]
    fn labels_identical_box() {
        let g = bx(10.0, 10.0, 50.0, 40.0);
        let s = scene_with(&[(3, g)]);
        for alpha in [0.0, 0.5, 1.0] {
            let l = assign_stage_labels(&[prop(g)], &s, alpha);
            assert_eq!(l[0].class, Some(3));
            assert_eq!(l[0].target, Some(BoxDelta::ZERO));
        }
    }

    #[test]
    fn labels_threshold_straddle() {
        let g = bx(0.0, 0.0, 100.0, 100.0);
        // 100 x 55 box inside the GT: IoU 0.55
        let p = bx(0.0, 0.0, 100.0, 55.0);
        assert!((iou(&p, &g) - 0.55).abs() < 1e-12);
        let s = scene_with(&[(1, g)]);
        assert_eq!(assign_stage_labels(&[prop(p)], &s, 0.6)[0].class, None);
        assert_eq!(assign_stage_labels(&[prop(p)], &s, 0.5)[0].class, Some(1));
        assert!(assign_stage_labels(&[prop(p)], &Scene::empty(10.0, 10.0), 0.0)[0]
            .class
            .is_none());
    }

    #[test]
    fn raising_alpha_never_adds_foreground() {
        let mut rng = seeded(4);
        let s = scene_with(&[(0, bx(20.0, 20.0, 80.0, 90.0)), (1, bx(100.0, 100.0, 150.0, 140.0))]);
        let props: Vec<Proposal> = (0..200)
            .map(|_| {
                let x = rng.random_range(0.0..150.0);
                let y = rng.random_range(0.0..150.0);
                prop(bx(
                    x,
                    y,
                    x + rng.random_range(5.0..60.0),
                    y + rng.random_range(5.0..60.0),
                ))
            })
            .collect();
        let mut prev: Vec<bool> = vec![true; props.len()];
        for step in 0..=10 {
            let fg: Vec<bool> = assign_stage_labels(&props, &s, step as f64 / 10.0)
                .iter()
                .map(|l| l.class.is_some())
                .collect();
            for (a, b) in fg.iter().zip(&prev) {
                assert!(!a || *b);
            }
            prev = fg;
        }
    }

    fn random_head(rng: &mut crate::rng::LabRng, classes: usize, dim: usize) -> StageHead {
        let mut h = StageHead::new((0..classes).collect(), dim);
        for i in 0..h.param_count() {
            *h.param_mut(i) = rng.random_range(-0.5..0.5);
        }
        h
    }

    fn random_batch(rng: &mut crate::rng::LabRng, head: &StageHead, n: usize) -> StageBatch {
        let mut b = StageBatch::default();
        for i in 0..n {
            b.features
                .push((0..head.feature_len()).map(|_| rng.random_range(-1.0..1.0)).collect());
            let row = i % (head.classes.len() + 1);
            b.rows.push(row);
            b.targets.push((row > 0).then(|| {
                BoxDelta::from_array([
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                ])
            }));
        }
        b
    }

    #[test]
    fn zero_lambda_or_lr_is_noop() {
        let mut rng = seeded(2);
        let h = random_head(&mut rng, 3, 5);
        let b = random_batch(&mut rng, &h, 6);
        let cfg = StageConfig {
            alpha: 0.5,
            lambda: 0.0,
        };
        assert_eq!(stage_step(&h, &cfg, &b, 0.3).unwrap().0, h);
        let cfg = StageConfig {
            alpha: 0.5,
            lambda: 1.0,
        };
        assert_eq!(stage_step(&h, &cfg, &b, 0.0).unwrap().0, h);
        let (same, loss) = stage_step(&h, &cfg, &StageBatch::default(), 0.3).unwrap();
        assert_eq!(same, h);
        assert_eq!(loss.weighted(), 0.0);
    }

    #[test]
    fn lambda_lr_linearity() {
        let mut rng = seeded(3);
        let h = random_head(&mut rng, 3, 5);
        let b = random_batch(&mut rng, &h, 6);
        let a = stage_step(
            &h,
            &StageConfig {
                alpha: 0.5,
                lambda: 0.5,
            },
            &b,
            0.2,
        )
        .unwrap()
        .0;
        let c = stage_step(
            &h,
            &StageConfig {
                alpha: 0.5,
                lambda: 1.0,
            },
            &b,
            0.1,
        )
        .unwrap()
        .0;
        assert_eq!(a, c);
    }

    #[test]
    fn stage_gradient_matches_finite_differences() {
        let mut rng = seeded(5);
        let h = random_head(&mut rng, 3, 4);
        let b = random_batch(&mut rng, &h, 6);
        let (_, g) = stage_loss_and_grad(&h, &b).unwrap();
        let analytic = g.params();
        let eps = 1e-6;
        for i in 0..h.param_count() {
            let mut p = h.clone();
            *p.param_mut(i) += eps;
            let mut m = h.clone();
            *m.param_mut(i) -= eps;
            let lp = stage_loss_and_grad(&p, &b).unwrap().0;
            let lm = stage_loss_and_grad(&m, &b).unwrap().0;
            let fd = ((lp.cls + lp.reg) - (lm.cls + lm.reg)) / (2.0 * eps);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-8);
            assert!((fd - analytic[i]).abs() / denom < 1e-5, "param {i}");
        }
    }

    #[test]
    fn widening_preserves_existing_logits() {
        let mut rng = seeded(6);
        let mut h = random_head(&mut rng, 3, 4);
        let x = vec![0.3, -0.2, 0.9, 0.1];
        let before = h.classifier.forward(&x);
        h.widen(&[7, 8]);
        let after = h.classifier.forward(&x);
        assert_eq!(&after[..4], &before[..]);
        assert_eq!(&after[4..], &[0.0, 0.0]);
        assert_eq!(h.row_of(8), Some(5));
    }

    fn zero_features(_: &BBox) -> Vec<f64> {
        vec![0.0; 4]
    }

    #[test]
    fn zero_regressor_keeps_boxes_and_count() {
        let h = StageHead::new(vec![0, 1], 4);
        let s = scene_with(&[(0, bx(10.0, 10.0, 60.0, 60.0))]);
        let props = vec![prop(bx(12.0, 8.0, 58.0, 70.0)), prop(bx(100.0, 100.0, 130.0, 120.0))];
        let out = refine(&h, &props, zero_features, &s, 1);
        assert_eq!(out.proposals.len(), 2);
        for (a, b) in out.proposals.iter().zip(&props) {
            assert_eq!(a.bbox, b.bbox);
            assert_eq!(a.source_stage, 1);
            assert_eq!(a.max_gt_iou, iou(&a.bbox, &s.annotations[0].bbox));
        }
    }

    /// Head whose regressor outputs a fixed delta regardless of features.
    fn constant_delta_head(d: [f64; 4]) -> StageHead {
        let mut h = StageHead::new(vec![0], 4);
        h.regressor.bias = d.to_vec();
        h
    }

    #[test]
    fn hand_set_regressor_matches_decode_example() {
        let h = constant_delta_head([0.5, 0.0, 2f64.ln(), 0.0]);
        let s = Scene::empty(100.0, 100.0);
        let out = refine(&h, &[prop(bx(0.0, 0.0, 10.0, 10.0))], zero_features, &s, 1);
        let b = out.proposals[0].bbox;
        for (x, y) in b.to_array().iter().zip([0.0, 0.0, 20.0, 10.0]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn three_stage_composition() {
        let deltas = [[0.1, -0.05, 0.2, 0.0], [0.0, 0.1, -0.1, 0.15], [-0.2, 0.0, 0.05, -0.1]];
        let cascade = Cascade {
            stages: deltas
                .iter()
                .zip(StageConfig::default_cascade())
                .map(|(d, config)| Stage {
                    config,
                    head: constant_delta_head(*d),
                })
                .collect(),
        };
        let s = Scene::empty(500.0, 500.0);
        let start = bx(100.0, 120.0, 180.0, 170.0);
        let out = run_cascade(&cascade, &[prop(start)], zero_features, &s, &DetectionConfig::default());
        let mut expect = start;
        for d in deltas {
            expect = decode_delta(&expect, &BoxDelta::from_array(d));
        }
        assert_eq!(out.snapshots.len(), 4);
        assert_eq!(out.snapshots[3][0].bbox, expect);
    }

    #[test]
    fn zero_cascade_keeps_input_boxes() {
        let c = Cascade::new(&StageConfig::default_cascade(), vec![0, 1], 4).unwrap();
        let s = scene_with(&[(0, bx(10.0, 10.0, 60.0, 60.0))]);
        let props = vec![prop(bx(12.0, 8.0, 58.0, 70.0)), prop(bx(100.0, 100.0, 130.0, 120.0))];
        let out = run_cascade(&c, &props, zero_features, &s, &DetectionConfig::default());
        for snap in &out.snapshots {
            assert_eq!(
                snap.iter().map(|p| p.bbox).collect::<Vec<_>>(),
                props.iter().map(|p| p.bbox).collect::<Vec<_>>()
            );
        }
        // uniform softmax over 3 rows gives 1/3 per class, above the floor
        assert_eq!(out.detections.len(), 4);
    }

    #[test]
    fn single_stage_is_one_head_pass() {
        let mut rng = seeded(8);
        let c = Cascade {
            stages: vec![Stage {
                config: StageConfig::single_stage()[0],
                head: random_head(&mut rng, 2, 4),
            }],
        };
        let s = scene_with(&[(0, bx(10.0, 10.0, 60.0, 60.0))]);
        let props = vec![prop(bx(12.0, 8.0, 58.0, 70.0))];
        let feat = |_: &BBox| vec![0.5, -0.5, 0.25, 1.0];
        let out = run_cascade(&c, &props, feat, &s, &DetectionConfig::default());
        let direct = refine(&c.stages[0].head, &props, feat, &s, 1);
        assert_eq!(out.snapshots[1], direct.proposals);
    }

    #[test]
    fn split_runs_compose() {
        let mut rng = seeded(9);
        let stages: Vec<Stage> = StageConfig::default_cascade()
            .into_iter()
            .map(|config| Stage {
                config,
                head: random_head(&mut rng, 2, 4),
            })
            .collect();
        let full = Cascade { stages: stages.clone() };
        let first = Cascade {
            stages: stages[..2].to_vec(),
        };
        let rest = Cascade {
            stages: stages[2..].to_vec(),
        };
        let s = scene_with(&[(1, bx(30.0, 30.0, 90.0, 80.0))]);
        let props = vec![prop(bx(25.0, 35.0, 85.0, 90.0)), prop(bx(0.0, 0.0, 40.0, 40.0))];
        let feat = |b: &BBox| vec![b.x1 / 100.0, b.y1 / 100.0, b.width() / 100.0, 1.0];
        let det = DetectionConfig::default();
        let a = run_cascade(&full, &props, feat, &s, &det);
        let b1 = run_cascade(&first, &props, feat, &s, &det);
        let b2 = run_cascade(&rest, &b1.snapshots[2], feat, &s, &det);
        assert_eq!(
            a.snapshots[3].iter().map(|p| p.bbox).collect::<Vec<_>>(),
            b2.snapshots[1].iter().map(|p| p.bbox).collect::<Vec<_>>()
        );
        assert_eq!(a.detections, b2.detections);
    }

    #[test]
    fn oracle_regressor_snaps_to_gt() {
        // features carry the exact delta target; identity regressor
        let g = bx(40.0, 50.0, 100.0, 90.0);
        let s = scene_with(&[(0, g)]);
        let mut h = StageHead::new(vec![0], 4);
        h.regressor.weight = vec![
            1.0, 0.0, 0.0, 0.0, //
            0.0, 1.0, 0.0, 0.0, //
            0.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        ];
        let feat = |b: &BBox| encode_delta(b, &g).unwrap().to_array().to_vec();
        let props = vec![prop(bx(35.0, 55.0, 90.0, 99.0)), prop(bx(50.0, 45.0, 110.0, 80.0))];
        let out = refine(&h, &props, feat, &s, 1);
        for p in &out.proposals {
            assert!((p.max_gt_iou - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn histogram_hand_tally() {
        let props: Vec<Proposal> = [0.45, 0.55, 0.8, 0.9, 0.2]
            .iter()
            .map(|&v| Proposal {
                max_gt_iou: v,
                ..prop(bx(0.0, 0.0, 1.0, 1.0))
            })
            .collect();
        let h = stage_iou_histogram(&[props, vec![]], &default_edges()).unwrap();
        assert_eq!(h.stages[0].counts, vec![0, 0, 0, 0, 1, 1, 0, 0, 1, 1]);
        assert_eq!(h.stages[0].total, 4);
        assert_eq!(h.stages[0].share_ge_075, 0.5);
        assert_eq!(h.stages[1].counts, vec![0; 10]);
        assert_eq!(h.stages[1].share_ge_075, 0.0);
        let back = StageHistogram::from_csv(&h.to_csv()).unwrap();
        assert_eq!(back, h);
    }

    #[test]
    fn histogram_edges_validated() {
        assert!(stage_iou_histogram(&[], &[0.5, 1.0]).is_err());
        assert!(stage_iou_histogram(&[], &[0.0, 0.6, 0.5, 1.0]).is_err());
        assert!(stage_iou_histogram(&[], &[0.0, 0.9]).is_err());
        let h = stage_iou_histogram(
            &[vec![Proposal {
                max_gt_iou: 1.0,
                ..prop(bx(0.0, 0.0, 1.0, 1.0))
            }]],
            &[0.4, 1.0],
        )
        .unwrap();
        assert_eq!(h.stages[0].counts, vec![1]);
    }

    #[test]
    fn cascade_rejects_non_increasing_alpha() {
        let bad = [
            StageConfig {
                alpha: 0.6,
                lambda: 1.0,
            },
            StageConfig {
                alpha: 0.5,
                lambda: 1.0,
            },
        ];
        assert!(Cascade::new(&bad, vec![0], 3).is_err());
        assert!(Cascade::new(&[], vec![0], 3).is_err());
    }
}
