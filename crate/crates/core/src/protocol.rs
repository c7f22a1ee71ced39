//! The two-phase training protocol: base training of the RPN and every
//! cascade stage on base-class scenes, then fine-tuning on a balanced K-shot
//! set over base and novel classes with a scaled RPN loss, plus the
//! evaluation passes and the ablation grid built on top of them.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cascade::{
    assign_stage_labels, default_edges, refine_with_features, run_cascade, stage_iou_histogram, stage_step_scaled,
    Cascade, CascadeOutput, DetectionConfig, StageBatch, StageConfig, StageHistogram, StageLoss,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, recall_at_k, Detection, EvalReport, EvalSettings, ImbalanceRun};
use crate::geometry::BBox;
use crate::proposals::{
    build_anchor_grid, generate_proposals, match_anchors, rpn_step_scaled, sample_anchor_batch, AnchorGrid, Proposal,
    ProposalConfig, RpnBatch, RpnHead,
};
use crate::rng::{derive_seed, substream, LabRng};
use crate::synth::{
    box_feature, generate_dataset, sample_k_shot, ClassId, ClassSplit, FeatureModel, Phase, Scene, SynthConfig,
};

const TAG_FEATURES: u64 = 1;
const TAG_BASE_TRAIN_SET: u64 = 2;
const TAG_BASE_TEST_SET: u64 = 3;
const TAG_NOVEL_POOL: u64 = 4;
const TAG_NOVEL_TEST_SET: u64 = 5;
const TAG_BASE_TRAIN: u64 = 6;
const TAG_FINETUNE: u64 = 7;
const TAG_SHOTS: u64 = 8;
const TAG_EVAL: u64 = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassCounts {
    pub base: usize,
    pub novel: usize,
}

impl Default for ClassCounts {
    fn default() -> Self {
        ClassCounts { base: 15, novel: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Base-class scenes available to base training.
    pub base_train_scenes: usize,
    /// Base-class scenes for the base evaluation pass.
    pub base_test_scenes: usize,
    /// Scenes over all classes from which K-shot sets are drawn.
    pub novel_pool_scenes: usize,
    /// Scenes over all classes for the fine-tuned evaluation pass.
    pub novel_test_scenes: usize,
    /// Base-training images also contain novel objects, present in the image
    /// but unannotated, so base training sees them as background.
    pub unlabeled_novel_in_base: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            base_train_scenes: 400,
            base_test_scenes: 100,
            novel_pool_scenes: 300,
            novel_test_scenes: 100,
            unlabeled_novel_in_base: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub anchor_stride: f64,
    pub anchor_scales: Vec<f64>,
    pub anchor_ratios: Vec<f64>,
    pub rpn_pos_thresh: f64,
    pub rpn_neg_thresh: f64,
    /// IoU at which a proposal counts as matched for analysis.
    pub alpha_rpn: f64,
    pub rpn_batch_size: usize,
    pub rpn_positive_fraction: f64,
    /// `doubled` is overridden per phase by [`TrainConfig`].
    pub proposals: ProposalConfig,
    pub stages: Vec<StageConfig>,
    pub detection: DetectionConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            anchor_stride: 8.0,
            anchor_scales: vec![32.0, 64.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            rpn_pos_thresh: 0.7,
            rpn_neg_thresh: 0.3,
            alpha_rpn: 0.5,
            rpn_batch_size: 64,
            rpn_positive_fraction: 0.5,
            proposals: ProposalConfig::default(),
            stages: StageConfig::default_cascade(),
            detection: DetectionConfig::default(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rpn_batch_size == 0 {
            return Err(Error::Config("rpn_batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.rpn_positive_fraction) {
            return Err(Error::Config("rpn_positive_fraction must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha_rpn) {
            return Err(Error::Config("alpha_rpn must be in [0, 1]".into()));
        }
        let d = &self.detection;
        if !(0.0..=1.0).contains(&d.score_floor) || !(0.0..=1.0).contains(&d.nms_thresh) || d.max_per_scene == 0 {
            return Err(Error::Config(
                "detection needs score_floor and nms_thresh in [0, 1] and max_per_scene >= 1".into(),
            ));
        }
        self.proposals.validate()?;
        StageConfig::validate_sequence(&self.stages)?;
        RpnHead::new(1, self.rpn_pos_thresh, self.rpn_neg_thresh, self.alpha_rpn)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_iterations: usize,
    pub finetune_iterations: usize,
    pub base_lr: f64,
    pub finetune_lr: f64,
    pub base_scenes_per_batch: usize,
    /// Split evenly between novel-bearing and base-only shot scenes.
    pub finetune_scenes_per_batch: usize,
    pub gamma_rpn: f64,
    /// Forces an effective `gamma_rpn` of 0 during fine-tuning.
    pub rpn_frozen: bool,
    /// 1-based indices of stage heads kept fixed during fine-tuning.
    pub frozen_stages: Vec<usize>,
    pub base_doubled: bool,
    pub finetune_doubled: bool,
    /// Learning-rate multiplier for every box-regression branch during base
    /// training.
    pub base_reg_lr_scale: f64,
    /// Learning-rate multiplier for every box-regression branch during
    /// fine-tuning.
    pub finetune_reg_lr_scale: f64,
    /// Appends each ground-truth box to the training proposals so every
    /// stage sees at least one positive per labelled object.
    pub append_gt_proposals: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_iterations: 2000,
            finetune_iterations: 400,
            base_lr: 0.5,
            finetune_lr: 3.0,
            base_scenes_per_batch: 1,
            finetune_scenes_per_batch: 2,
            gamma_rpn: 0.5,
            rpn_frozen: false,
            frozen_stages: Vec::new(),
            base_doubled: false,
            finetune_doubled: true,
            base_reg_lr_scale: 5.0,
            finetune_reg_lr_scale: 0.5,
            append_gt_proposals: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, stages: usize) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !(finite_nonneg(self.base_lr) && finite_nonneg(self.finetune_lr)) {
            return Err(Error::Config("learning rates must be finite and >= 0".into()));
        }
        if !(finite_nonneg(self.base_reg_lr_scale) && finite_nonneg(self.finetune_reg_lr_scale)) {
            return Err(Error::Config(
                "regression learning-rate scales must be finite and >= 0".into(),
            ));
        }
        if !finite_nonneg(self.gamma_rpn) {
            return Err(Error::Config("gamma_rpn must be finite and >= 0".into()));
        }
        if self.base_scenes_per_batch == 0 || self.finetune_scenes_per_batch == 0 {
            return Err(Error::Config("scenes_per_batch must be at least 1".into()));
        }
        if let Some(&t) = self.frozen_stages.iter().find(|&&t| t == 0 || t > stages) {
            return Err(Error::Config(format!("frozen stage {t} outside 1..={stages}")));
        }
        Ok(())
    }

    /// The RPN loss scale actually applied during fine-tuning.
    pub fn effective_gamma(&self) -> f64 {
        if self.rpn_frozen {
            0.0
        } else {
            self.gamma_rpn
        }
    }
}

/// Everything that defines one experiment apart from the master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    /// Scene and feature-model parameters; `synth.seed` is replaced by seeds
    /// derived from the master seed.
    pub synth: SynthConfig,
    pub classes: ClassCounts,
    pub data: DataConfig,
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        if self.classes.base == 0 || self.classes.novel == 0 {
            return Err(Error::Config("need at least one base and one novel class".into()));
        }
        let d = &self.data;
        if d.base_train_scenes == 0 || d.base_test_scenes == 0 || d.novel_pool_scenes == 0 || d.novel_test_scenes == 0 {
            return Err(Error::Config("every dataset needs at least one scene".into()));
        }
        self.detector.validate()?;
        self.train.validate(self.detector.stages.len())?;
        if self.eval.recall_k == 0
            || !(0.0..=1.0).contains(&self.eval.iou)
            || !(0.0..=1.0).contains(&self.eval.recall_iou)
        {
            return Err(Error::Config("eval needs recall_k >= 1 and IoUs in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn split(&self) -> ClassSplit {
        ClassSplit::contiguous(self.classes.base, self.classes.novel)
    }

    /// The same configuration with refinement off: one stage, α = 0.5, λ = 1.
    pub fn single_stage(&self) -> ProtocolConfig {
        let mut c = self.clone();
        c.detector.stages = StageConfig::single_stage();
        c.train.frozen_stages.retain(|&t| t == 1);
        c
    }
}

/// The fixed synthetic world of one seed: feature model and datasets.
#[derive(Debug, Clone)]
pub struct World {
    pub seed: u64,
    pub split: ClassSplit,
    pub model: Arc<FeatureModel>,
    pub base_train: Vec<Scene>,
    pub base_test: Vec<Scene>,
    pub novel_pool: Vec<Scene>,
    pub novel_test: Vec<Scene>,
}

impl World {
    pub fn build(cfg: &ProtocolConfig, seed: u64) -> Result<World> {
        cfg.validate()?;
        let split = cfg.split();
        let model = FeatureModel::new(&cfg.synth.feature, &split, derive_seed(seed, TAG_FEATURES))?;
        let gen = |tag: u64, n: usize, phase: Phase| {
            generate_dataset(&cfg.synth.with_seed(derive_seed(seed, tag)), &split, n, phase)
        };
        let base_train = if cfg.data.unlabeled_novel_in_base {
            gen(TAG_BASE_TRAIN_SET, cfg.data.base_train_scenes, Phase::Balanced)?
                .iter()
                .map(|s| s.hide_classes(|c| split.is_novel(c)))
                .collect()
        } else {
            gen(TAG_BASE_TRAIN_SET, cfg.data.base_train_scenes, Phase::Base)?
        };
        Ok(World {
            seed,
            base_train,
            base_test: gen(TAG_BASE_TEST_SET, cfg.data.base_test_scenes, Phase::Base)?,
            novel_pool: gen(TAG_NOVEL_POOL, cfg.data.novel_pool_scenes, Phase::Balanced)?,
            novel_test: gen(TAG_NOVEL_TEST_SET, cfg.data.novel_test_scenes, Phase::Balanced)?,
            model: Arc::new(model),
            split,
        })
    }

    /// The K-shot fine-tuning set: exactly `k` instances of every class.
    pub fn shots(&self, k: usize) -> Result<Vec<Scene>> {
        sample_k_shot(
            &self.novel_pool,
            &self.split,
            k,
            derive_seed(self.seed, TAG_SHOTS ^ (k as u64) << 8),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorPhase {
    Init,
    Base,
    Novel,
}

impl DetectorPhase {
    pub fn name(self) -> &'static str {
        match self {
            DetectorPhase::Init => "init",
            DetectorPhase::Base => "base",
            DetectorPhase::Novel => "novel",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Detector {
    pub feature_model: Arc<FeatureModel>,
    pub grid: AnchorGrid,
    pub rpn: RpnHead,
    pub cascade: Cascade,
    pub phase: DetectorPhase,
    /// Proposal settings of the current phase (doubling included).
    pub proposals: ProposalConfig,
    pub config: DetectorConfig,
}

/// Serializable view of a detector's trainable state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSummary {
    pub phase: DetectorPhase,
    pub classes: Vec<ClassId>,
    pub anchors: usize,
    pub proposals: ProposalConfig,
    pub rpn: RpnHead,
    pub cascade: Cascade,
}

impl Detector {
    /// Untrained detector over `classes` for scenes of the given size.
    pub fn init(
        model: Arc<FeatureModel>,
        cfg: &DetectorConfig,
        classes: Vec<ClassId>,
        width: f64,
        height: f64,
    ) -> Result<Detector> {
        cfg.validate()?;
        let grid = build_anchor_grid(width, height, cfg.anchor_stride, &cfg.anchor_scales, &cfg.anchor_ratios)?;
        let d = model.feature_len();
        Ok(Detector {
            rpn: RpnHead::new(d, cfg.rpn_pos_thresh, cfg.rpn_neg_thresh, cfg.alpha_rpn)?,
            cascade: Cascade::new(&cfg.stages, classes, d)?,
            feature_model: model,
            grid,
            phase: DetectorPhase::Init,
            proposals: cfg.proposals,
            config: cfg.clone(),
        })
    }

    pub fn classes(&self) -> &[ClassId] {
        self.cascade.stages.first().map_or(&[], |s| &s.head.classes)
    }

    pub fn summary(&self) -> DetectorSummary {
        DetectorSummary {
            phase: self.phase,
            classes: self.classes().to_vec(),
            anchors: self.grid.anchors.len(),
            proposals: self.proposals,
            rpn: self.rpn.clone(),
            cascade: self.cascade.clone(),
        }
    }

    pub fn anchor_features(&self, scene: &Scene, rng: &mut LabRng) -> Vec<Vec<f64>> {
        self.grid
            .anchors
            .iter()
            .map(|a| box_feature(&self.feature_model, scene, a, rng))
            .collect()
    }

    fn check_scene(&self, scene: &Scene) -> Result<()> {
        if scene.width != self.grid.width || scene.height != self.grid.height {
            return Err(Error::Config(format!(
                "scene is {}x{} but the anchor grid covers {}x{}",
                scene.width, scene.height, self.grid.width, self.grid.height
            )));
        }
        Ok(())
    }

    /// Proposals and the full cascade pass for one scene. All feature noise
    /// comes from `rng`.
    pub fn detect(&self, scene: &Scene, rng: &mut LabRng) -> Result<CascadeOutput> {
        self.check_scene(scene)?;
        let feats = self.anchor_features(scene, rng);
        let props = generate_proposals(&self.rpn, &self.grid, &feats, &scene.gt_boxes(), &self.proposals)?;
        let model = &self.feature_model;
        Ok(run_cascade(
            &self.cascade,
            &props,
            |b: &BBox| box_feature(model, scene, b, rng),
            scene,
            &self.config.detection,
        ))
    }
}

/// Losses of one training iteration, each measured before its update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLoss {
    pub iteration: usize,
    pub phase: DetectorPhase,
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub gamma: f64,
    pub stages: Vec<StageLoss>,
    /// `gamma * (rpn_cls + rpn_reg) + sum_t lambda_t * (cls_t + reg_t)`.
    pub total: f64,
}

impl IterationLoss {
    /// Recomputes the total from the logged components.
    pub fn recompute_total(&self) -> f64 {
        self.gamma * (self.rpn_cls + self.rpn_reg) + self.stages.iter().map(StageLoss::weighted).sum::<f64>()
    }
}

/// Loss trace as CSV: `phase,iteration,rpn_cls,rpn_reg,gamma`, then
/// `s{t}_cls,s{t}_reg,s{t}_lambda` per stage, then `total`.
pub fn losses_to_csv(trace: &[IterationLoss]) -> String {
    use std::fmt::Write as _;
    let stages = trace.iter().map(|l| l.stages.len()).max().unwrap_or(0);
    let mut s = String::from("phase,iteration,rpn_cls,rpn_reg,gamma");
    for t in 1..=stages {
        let _ = write!(s, ",s{t}_cls,s{t}_reg,s{t}_lambda");
    }
    s.push_str(",total\n");
    for l in trace {
        let _ = write!(
            s,
            "{},{},{},{},{}",
            l.phase.name(),
            l.iteration,
            l.rpn_cls,
            l.rpn_reg,
            l.gamma
        );
        for t in 0..stages {
            match l.stages.get(t) {
                Some(st) => {
                    let _ = write!(s, ",{},{},{}", st.cls, st.reg, st.lambda);
                }
                None => s.push_str(",,,"),
            }
        }
        let _ = writeln!(s, ",{}", l.total);
    }
    s
}

/// One SGD iteration over `scenes` for the RPN (scale `gamma`) and every
/// stage not listed in `frozen_stages`.
#[allow(clippy::too_many_arguments)]
fn train_iteration(
    det: &mut Detector,
    scenes: &[&Scene],
    lr: f64,
    gamma: f64,
    frozen_stages: &[usize],
    reg_lr_scale: f64,
    append_gt: bool,
    rng: &mut LabRng,
) -> Result<(f64, f64, Vec<StageLoss>)> {
    let cfg = det.config.clone();
    let mut rpn_batch = RpnBatch::default();
    let mut stage_batches = vec![StageBatch::default(); det.cascade.len()];
    for scene in scenes {
        det.check_scene(scene)?;
        let feats = det.anchor_features(scene, rng);
        let m = match_anchors(&det.grid.anchors, scene, cfg.rpn_pos_thresh, cfg.rpn_neg_thresh);
        for i in sample_anchor_batch(&m, cfg.rpn_batch_size, cfg.rpn_positive_fraction, rng) {
            rpn_batch.push(feats[i].clone(), m.targets[i]);
        }
        let mut current: Vec<Proposal> =
            generate_proposals(&det.rpn, &det.grid, &feats, &scene.gt_boxes(), &det.proposals)?;
        if append_gt {
            current.extend(scene.annotations.iter().enumerate().map(|(i, a)| Proposal {
                bbox: a.bbox,
                objectness: 1.0,
                max_gt_iou: 1.0,
                matched_gt: Some(i),
                source_stage: 0,
            }));
        }
        for (t, stage) in det.cascade.stages.iter().enumerate() {
            let stage_feats: Vec<Vec<f64>> = current
                .iter()
                .map(|p| box_feature(&det.feature_model, scene, &p.bbox, rng))
                .collect();
            let labels = assign_stage_labels(&current, scene, stage.config.alpha);
            for (f, l) in stage_feats.iter().zip(&labels) {
                stage_batches[t].push(&stage.head, f.clone(), l);
            }
            current = refine_with_features(&stage.head, &current, &stage_feats, scene, t + 1).proposals;
        }
    }
    let (rpn, rpn_loss) = rpn_step_scaled(&det.rpn, &rpn_batch, lr, gamma, reg_lr_scale)?;
    det.rpn = rpn;
    let mut losses = Vec::with_capacity(det.cascade.len());
    for (t, (stage, batch)) in det.cascade.stages.iter_mut().zip(&stage_batches).enumerate() {
        let frozen = frozen_stages.contains(&(t + 1));
        let (head, loss) = stage_step_scaled(
            &stage.head,
            &stage.config,
            batch,
            if frozen { 0.0 } else { lr },
            reg_lr_scale,
        )?;
        stage.head = head;
        losses.push(loss);
    }
    Ok((rpn_loss.cls, rpn_loss.reg, losses))
}

fn record(iteration: usize, phase: DetectorPhase, gamma: f64, parts: (f64, f64, Vec<StageLoss>)) -> IterationLoss {
    let mut l = IterationLoss {
        iteration,
        phase,
        rpn_cls: parts.0,
        rpn_reg: parts.1,
        gamma,
        stages: parts.2,
        total: 0.0,
    };
    l.total = l.recompute_total();
    l
}

/// Trains a fresh detector over the base classes on `world.base_train`.
/// The RPN loss enters with weight 1; stage `t` with its `lambda`.
pub fn base_train(cfg: &ProtocolConfig, world: &World, seed: u64) -> Result<(Detector, Vec<IterationLoss>)> {
    cfg.validate()?;
    let mut det = Detector::init(
        world.model.clone(),
        &cfg.detector,
        world.split.base().to_vec(),
        cfg.synth.scene_width,
        cfg.synth.scene_height,
    )?;
    det.proposals.doubled = cfg.train.base_doubled;
    let train_seed = derive_seed(seed, TAG_BASE_TRAIN);
    let mut trace = Vec::with_capacity(cfg.train.base_iterations);
    for it in 0..cfg.train.base_iterations {
        let mut rng = substream(train_seed, it as u64);
        let picks: Vec<&Scene> = (0..cfg.train.base_scenes_per_batch)
            .map(|_| &world.base_train[rng.random_range(0..world.base_train.len())])
            .collect();
        let parts = train_iteration(
            &mut det,
            &picks,
            cfg.train.base_lr,
            1.0,
            &[],
            cfg.train.base_reg_lr_scale,
            cfg.train.append_gt_proposals,
            &mut rng,
        )?;
        trace.push(record(it, DetectorPhase::Base, 1.0, parts));
    }
    det.phase = DetectorPhase::Base;
    Ok((det, trace))
}

/// Fine-tunes a base detector on a K-shot set over all classes. The
/// classifiers are widened with zero rows for the novel classes; every batch
/// draws half its scenes from shots containing a novel object and half from
/// base-only shots (all from one pool when the other is empty).
pub fn novel_finetune(
    det: &Detector,
    cfg: &ProtocolConfig,
    split: &ClassSplit,
    shots: &[Scene],
    seed: u64,
) -> Result<(Detector, Vec<IterationLoss>)> {
    if det.phase != DetectorPhase::Base {
        return Err(Error::PhaseViolation {
            expected: DetectorPhase::Base.name(),
            found: det.phase.name(),
        });
    }
    cfg.train.validate(det.cascade.len())?;
    if shots.is_empty() {
        return Err(Error::Config("fine-tuning needs at least one shot scene".into()));
    }
    let mut out = det.clone();
    let missing: Vec<ClassId> = split
        .novel()
        .iter()
        .copied()
        .filter(|c| !det.classes().contains(c))
        .collect();
    out.cascade.widen(&missing);
    out.proposals.doubled = cfg.train.finetune_doubled;
    let (novel_pool, base_pool): (Vec<&Scene>, Vec<&Scene>) = shots
        .iter()
        .partition(|s| s.annotations.iter().any(|a| split.is_novel(a.class_id)));
    let gamma = cfg.train.effective_gamma();
    let n = cfg.train.finetune_scenes_per_batch;
    let ft_seed = derive_seed(seed, TAG_FINETUNE);
    let mut trace = Vec::with_capacity(cfg.train.finetune_iterations);
    for it in 0..cfg.train.finetune_iterations {
        let mut rng = substream(ft_seed, it as u64);
        let picks: Vec<&Scene> = (0..n)
            .map(|j| {
                let pool = match (j % 2 == 0, novel_pool.is_empty(), base_pool.is_empty()) {
                    (_, true, _) => &base_pool,
                    (_, _, true) => &novel_pool,
                    (true, _, _) => &novel_pool,
                    (false, _, _) => &base_pool,
                };
                pool[rng.random_range(0..pool.len())]
            })
            .collect();
        let parts = train_iteration(
            &mut out,
            &picks,
            cfg.train.finetune_lr,
            gamma,
            &cfg.train.frozen_stages,
            cfg.train.finetune_reg_lr_scale,
            cfg.train.append_gt_proposals,
            &mut rng,
        )?;
        trace.push(record(it, DetectorPhase::Novel, gamma, parts));
    }
    out.phase = DetectorPhase::Novel;
    Ok((out, trace))
}

/// Name of synthetic class `c` in reports and written files.
pub fn class_name(c: ClassId) -> String {
    format!("class_{c:02}")
}

/// Runs the detector on every scene; scene `i` draws its feature noise from
/// its own substream, so the result does not depend on scheduling.
pub fn detect_all(det: &Detector, scenes: &[Scene], seed: u64) -> Result<Vec<CascadeOutput>> {
    let eval_seed = derive_seed(seed, TAG_EVAL);
    scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| det.detect(s, &mut substream(eval_seed, i as u64)))
        .collect()
}

/// Flattens per-scene cascade outputs into scored detections.
pub fn to_detections(outputs: &[CascadeOutput]) -> Vec<Detection> {
    outputs
        .iter()
        .enumerate()
        .flat_map(|(i, o)| {
            o.detections.iter().map(move |d| Detection {
                scene: i,
                class_id: d.class_id,
                bbox: d.bbox,
                confidence: d.score,
            })
        })
        .collect()
}

/// Recall of the RPN proposals over ground truth of the given classes.
pub fn proposal_recall(
    outputs: &[CascadeOutput],
    scenes: &[Scene],
    classes: &[ClassId],
    iou: f64,
    k: usize,
) -> Result<f64> {
    let props: Vec<Vec<Proposal>> = outputs.iter().map(|o| o.snapshots[0].clone()).collect();
    let gts: Vec<Vec<BBox>> = scenes
        .iter()
        .map(|s| {
            s.annotations
                .iter()
                .filter(|a| !a.difficult && classes.contains(&a.class_id))
                .map(|a| a.bbox)
                .collect()
        })
        .collect();
    recall_at_k(&props, &gts, iou, k)
}

/// Positive RPN proposals split by the split membership of the ground truth
/// they overlap most: `(base, novel)`.
pub fn imbalance_runs(outputs: &[CascadeOutput], scenes: &[Scene], split: &ClassSplit) -> (ImbalanceRun, ImbalanceRun) {
    let mut base = ImbalanceRun {
        ious: Vec::new(),
        images: scenes.len(),
    };
    let mut novel = base.clone();
    for (o, s) in outputs.iter().zip(scenes) {
        for p in &o.snapshots[0] {
            if let Some((gi, v)) = s.best_match(&p.bbox).filter(|&(_, v)| v > 0.0) {
                let run = if split.is_novel(s.annotations[gi].class_id) {
                    &mut novel
                } else {
                    &mut base
                };
                run.ious.push(v);
            }
        }
    }
    (base, novel)
}

/// Everything measured in one evaluation pass.
#[derive(Debug, Clone)]
pub struct EvalPass {
    pub report: EvalReport,
    pub outputs: Vec<CascadeOutput>,
    pub histogram: StageHistogram,
    pub metrics: PassMetrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PassMetrics {
    pub base_ap50: Option<f64>,
    pub novel_ap50: Option<f64>,
    pub base_range_ap: Option<f64>,
    pub novel_range_ap: Option<f64>,
    pub base_recall: Option<f64>,
    pub novel_recall: Option<f64>,
}

/// Evaluates `det` on `scenes` over the detector's classes.
pub fn evaluate_pass(
    det: &Detector,
    scenes: &[Scene],
    split: &ClassSplit,
    settings: &EvalSettings,
    seed: u64,
) -> Result<EvalPass> {
    let outputs = detect_all(det, scenes, seed)?;
    let dets = to_detections(&outputs);
    let gts: Vec<Vec<_>> = scenes.iter().map(|s| s.annotations.clone()).collect();
    let props: Vec<Vec<Proposal>> = outputs.iter().map(|o| o.snapshots[0].clone()).collect();
    let classes = det.classes().to_vec();
    let report = evaluate(&dets, &gts, &classes, &class_name, Some(&props), settings)?;
    let snapshots: Vec<Vec<Proposal>> = (0..=det.cascade.len())
        .map(|t| outputs.iter().flat_map(|o| o.snapshots[t].iter().copied()).collect())
        .collect();
    let histogram = stage_iou_histogram(&snapshots, &default_edges())?;
    let recall = |cs: &[ClassId]| proposal_recall(&outputs, scenes, cs, settings.recall_iou, settings.recall_k).ok();
    let metrics = PassMetrics {
        base_ap50: report.subset_map(split.base()),
        novel_ap50: report.subset_map(split.novel()),
        base_range_ap: report.subset_map_range(split.base()),
        novel_range_ap: report.subset_map_range(split.novel()),
        base_recall: recall(split.base()),
        novel_recall: recall(split.novel()),
    };
    Ok(EvalPass {
        report,
        outputs,
        histogram,
        metrics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    pub gammas: Vec<f64>,
    /// `true` runs the configured cascade, `false` a single stage.
    pub refinement: Vec<bool>,
    pub shots: Vec<usize>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid {
            gammas: vec![0.0, 0.5, 1.0],
            refinement: vec![true, false],
            shots: vec![5],
        }
    }
}

impl AblationGrid {
    pub fn validate(&self) -> Result<()> {
        if self.gammas.is_empty() || self.refinement.is_empty() || self.shots.is_empty() {
            return Err(Error::Config("ablation grid axes must be non-empty".into()));
        }
        if self.gammas.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(Error::Config("ablation gammas must be finite and >= 0".into()));
        }
        if self.shots.contains(&0) {
            return Err(Error::Config("ablation shots must be at least 1".into()));
        }
        Ok(())
    }

    fn cells(&self) -> Vec<(usize, f64, bool)> {
        let mut out = Vec::new();
        for &k in &self.shots {
            for &r in &self.refinement {
                for &g in &self.gammas {
                    out.push((k, g, r));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub gamma_rpn: f64,
    pub refinement: bool,
    pub k: usize,
    pub novel_ap50: Option<f64>,
    pub base_ap50: Option<f64>,
    pub novel_range_ap: Option<f64>,
    pub novel_recall: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: Option<f64>,
    /// Sample standard deviation (0 for a single value).
    pub std: Option<f64>,
    pub n: usize,
}

impl Stat {
    pub fn of(values: impl Iterator<Item = Option<f64>>) -> Stat {
        let v: Vec<f64> = values.flatten().collect();
        let n = v.len();
        if n == 0 {
            return Stat {
                mean: None,
                std: None,
                n,
            };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Stat {
            mean: Some(mean),
            std: Some(var.sqrt()),
            n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationAggregate {
    pub gamma_rpn: f64,
    pub refinement: bool,
    pub k: usize,
    pub novel_ap50: Stat,
    pub base_ap50: Stat,
    pub novel_range_ap: Stat,
    pub novel_recall: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub aggregates: Vec<AblationAggregate>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

impl AblationTable {
    pub fn aggregate(&self, gamma: f64, refinement: bool, k: usize) -> Option<&AblationAggregate> {
        self.aggregates
            .iter()
            .find(|a| a.gamma_rpn == gamma && a.refinement == refinement && a.k == k)
    }

    /// Detail rows (`kind=run`) followed by `mean` and `std` rows per cell.
    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let mut s = String::from("kind,seed,gamma_rpn,refinement,k,novel_ap50,base_ap50,novel_range_ap,novel_recall\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "run,{},{},{},{},{},{},{},{}",
                r.seed,
                r.gamma_rpn,
                r.refinement,
                r.k,
                fmt_opt(r.novel_ap50),
                fmt_opt(r.base_ap50),
                fmt_opt(r.novel_range_ap),
                fmt_opt(r.novel_recall)
            );
        }
        for a in &self.aggregates {
            for (kind, pick) in [("mean", 0), ("std", 1)] {
                let f = |st: &Stat| fmt_opt(if pick == 0 { st.mean } else { st.std });
                let _ = writeln!(
                    s,
                    "{kind},,{},{},{},{},{},{},{}",
                    a.gamma_rpn,
                    a.refinement,
                    a.k,
                    f(&a.novel_ap50),
                    f(&a.base_ap50),
                    f(&a.novel_range_ap),
                    f(&a.novel_recall)
                );
            }
        }
        s
    }
}

/// A fine-tuned detector with its loss trace and novel evaluation pass.
#[derive(Debug, Clone)]
pub struct CellRun {
    pub detector: Detector,
    pub trace: Vec<IterationLoss>,
    pub pass: EvalPass,
}

/// Fine-tunes and evaluates one cell of the ablation grid.
pub fn run_cell(
    cfg: &ProtocolConfig,
    world: &World,
    base: &Detector,
    k: usize,
    gamma: f64,
    seed: u64,
) -> Result<CellRun> {
    let mut c = cfg.clone();
    c.train.gamma_rpn = gamma;
    let shots = world.shots(k)?;
    // cells that differ only in gamma or refinement share shots and noise
    let cell_seed = derive_seed(seed, k as u64);
    let (detector, trace) = novel_finetune(base, &c, &world.split, &shots, cell_seed)?;
    let pass = evaluate_pass(&detector, &world.novel_test, &world.split, &cfg.eval, seed)?;
    Ok(CellRun { detector, trace, pass })
}

/// Runs every grid cell for every seed. Each seed builds its own world and
/// base detectors; cells run in parallel and rows come back in
/// (seed, k, refinement, gamma) order regardless of scheduling.
pub fn run_ablation(cfg: &ProtocolConfig, grid: &AblationGrid, seeds: &[u64]) -> Result<AblationTable> {
    grid.validate()?;
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let single = cfg.single_stage();
    let per_seed: Vec<Vec<AblationRow>> = seeds
        .par_iter()
        .map(|&seed| -> Result<Vec<AblationRow>> {
            let world = World::build(cfg, seed)?;
            let cascade_base = if grid.refinement.contains(&true) {
                Some(base_train(cfg, &world, seed)?.0)
            } else {
                None
            };
            let single_base = if grid.refinement.contains(&false) {
                Some(base_train(&single, &world, seed)?.0)
            } else {
                None
            };
            grid.cells()
                .into_par_iter()
                .map(|(k, gamma, refinement)| {
                    let (c, base) = if refinement {
                        (cfg, cascade_base.as_ref().expect("trained"))
                    } else {
                        (&single, single_base.as_ref().expect("trained"))
                    };
                    let pass = run_cell(c, &world, base, k, gamma, seed)?.pass;
                    Ok(AblationRow {
                        seed,
                        gamma_rpn: gamma,
                        refinement,
                        k,
                        novel_ap50: pass.metrics.novel_ap50,
                        base_ap50: pass.metrics.base_ap50,
                        novel_range_ap: pass.metrics.novel_range_ap,
                        novel_recall: pass.metrics.novel_recall,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let rows: Vec<AblationRow> = per_seed.into_iter().flatten().collect();
    let aggregates = grid
        .cells()
        .into_iter()
        .map(|(k, gamma, refinement)| {
            let cell: Vec<&AblationRow> = rows
                .iter()
                .filter(|r| r.k == k && r.gamma_rpn == gamma && r.refinement == refinement)
                .collect();
            AblationAggregate {
                gamma_rpn: gamma,
                refinement,
                k,
                novel_ap50: Stat::of(cell.iter().map(|r| r.novel_ap50)),
                base_ap50: Stat::of(cell.iter().map(|r| r.base_ap50)),
                novel_range_ap: Stat::of(cell.iter().map(|r| r.novel_range_ap)),
                novel_recall: Stat::of(cell.iter().map(|r| r.novel_recall)),
            }
        })
        .collect();
    Ok(AblationTable { rows, aggregates })
}
