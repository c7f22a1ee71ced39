//! Synthetic scenes, class splits, K-shot subsets and the analytic feature
//! model that stands in for a frozen backbone.
//!
//! The feature of a box is a mixture of the prototype of the ground-truth
//! object it overlaps most and a background prototype, weighted by that IoU,
//! plus Gaussian noise. Four localisation dimensions carry the regression
//! target towards that object, corrupted by the same noise. Novel classes get
//! shrunken prototypes and larger noise, so their features are systematically
//! less informative than those of base classes.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{encode_delta, iou, BBox};
use crate::rng::{seeded, substream, LabRng};

pub type ClassId = usize;

/// Number of localisation dimensions appended to every feature vector.
pub const CUE_DIMS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSplit", into = "RawSplit")]
pub struct ClassSplit {
    base: Vec<ClassId>,
    novel: Vec<ClassId>,
}

#[derive(Serialize, Deserialize)]
struct RawSplit {
    base: Vec<ClassId>,
    novel: Vec<ClassId>,
}

impl TryFrom<RawSplit> for ClassSplit {
    type Error = Error;
    fn try_from(r: RawSplit) -> Result<Self> {
        ClassSplit::new(r.base, r.novel)
    }
}

impl From<ClassSplit> for RawSplit {
    fn from(s: ClassSplit) -> Self {
        RawSplit {
            base: s.base,
            novel: s.novel,
        }
    }
}

impl ClassSplit {
    pub fn new(base: Vec<ClassId>, novel: Vec<ClassId>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for c in base.iter().chain(&novel) {
            if !seen.insert(*c) {
                return Err(Error::Config(format!("class {c} appears twice in the class split")));
            }
        }
        Ok(ClassSplit { base, novel })
    }

    /// Base classes `0..n_base`, novel classes `n_base..n_base + n_novel`.
    pub fn contiguous(n_base: usize, n_novel: usize) -> Self {
        ClassSplit {
            base: (0..n_base).collect(),
            novel: (n_base..n_base + n_novel).collect(),
        }
    }

    pub fn base(&self) -> &[ClassId] {
        &self.base
    }

    pub fn novel(&self) -> &[ClassId] {
        &self.novel
    }

    pub fn all(&self) -> Vec<ClassId> {
        self.base.iter().chain(&self.novel).copied().collect()
    }

    pub fn is_novel(&self, c: ClassId) -> bool {
        self.novel.contains(&c)
    }

    pub fn num_classes(&self) -> usize {
        self.base.len() + self.novel.len()
    }

    pub fn classes_for(&self, phase: Phase) -> Vec<ClassId> {
        match phase {
            Phase::Base => self.base.clone(),
            Phase::Novel => self.novel.clone(),
            Phase::Balanced => self.all(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Base,
    Novel,
    Balanced,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Base => "base",
            Phase::Novel => "novel",
            Phase::Balanced => "balanced",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class_id: ClassId,
    pub bbox: BBox,
    /// VOC `difficult` / COCO `iscrowd`: excluded from matching and AP denominators.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub difficult: bool,
}

impl Annotation {
    pub fn new(class_id: ClassId, bbox: BBox) -> Self {
        Annotation {
            class_id,
            bbox,
            difficult: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub width: f64,
    pub height: f64,
    pub annotations: Vec<Annotation>,
    /// Objects present in the image that carry no label in this dataset
    /// (e.g. novel objects in base-training images). They shape features but
    /// are never matched, trained on or evaluated.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unlabeled: Vec<Annotation>,
}

impl Scene {
    pub fn empty(width: f64, height: f64) -> Self {
        Scene {
            width,
            height,
            annotations: Vec::new(),
            unlabeled: Vec::new(),
        }
    }

    pub fn gt_boxes(&self) -> Vec<BBox> {
        self.annotations.iter().map(|a| a.bbox).collect()
    }

    /// Index and IoU of the annotation overlapping `b` most; ties go to the
    /// lowest index. `None` for an empty scene.
    pub fn best_match(&self, b: &BBox) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, a) in self.annotations.iter().enumerate() {
            let v = iou(b, &a.bbox);
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((i, v));
            }
        }
        best
    }

    /// Like [`Scene::best_match`] but over every object in the image, labelled
    /// or not: annotations first, then unlabeled objects.
    pub fn best_object(&self, b: &BBox) -> Option<(&Annotation, f64)> {
        let mut best: Option<(&Annotation, f64)> = None;
        for a in self.annotations.iter().chain(&self.unlabeled) {
            let v = iou(b, &a.bbox);
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((a, v));
            }
        }
        best
    }

    /// Moves annotations whose class satisfies `hide` into `unlabeled`.
    pub fn hide_classes(&self, hide: impl Fn(ClassId) -> bool) -> Scene {
        let (hidden, kept): (Vec<Annotation>, Vec<Annotation>) =
            self.annotations.iter().partition(|a| hide(a.class_id));
        Scene {
            width: self.width,
            height: self.height,
            annotations: kept,
            unlabeled: self.unlabeled.iter().copied().chain(hidden).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ObjectCount {
    Fixed { n: usize },
    Poisson { mean: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub dim: usize,
    /// Standard deviation of each class-prototype entry.
    pub prototype_scale: f64,
    /// Standard deviation of each background-prototype entry.
    pub background_scale: f64,
    pub noise_base: f64,
    pub noise_novel: f64,
    pub novel_shrink: f64,
    /// Gain `k` of the localization-cue noise `sigma_c * (1 + k * (1 - v))`:
    /// a box that barely overlaps its object sees less of it and so carries
    /// a weaker cue. `0` gives every overlapping box the same cue noise.
    pub cue_noise_gain: f64,
    /// Fraction `w` of each prototype's variance carried by a direction
    /// shared by all classes: `mu_c = scale * (sqrt(w) * u + sqrt(1 - w) * z_c)`.
    /// The shared part is what a class-agnostic objectness score can key on.
    pub objectness_share: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            dim: 32,
            prototype_scale: 0.2,
            background_scale: 0.0,
            noise_base: 0.06,
            noise_novel: 0.12,
            novel_shrink: 0.6,
            cue_noise_gain: 0.0,
            objectness_share: 0.0,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("feature.dim must be positive".into()));
        }
        if !(self.noise_base > 0.0 && self.noise_novel >= self.noise_base) {
            return Err(Error::Config(
                "feature noise must satisfy noise_novel >= noise_base > 0".into(),
            ));
        }
        if !(self.novel_shrink > 0.0 && self.novel_shrink <= 1.0) {
            return Err(Error::Config("feature.novel_shrink must be in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.objectness_share) {
            return Err(Error::Config("feature.objectness_share must be in [0, 1)".into()));
        }
        if !(self.cue_noise_gain >= 0.0 && self.cue_noise_gain.is_finite()) {
            return Err(Error::Config("feature.cue_noise_gain must be finite and >= 0".into()));
        }
        if !(self.prototype_scale.is_finite()
            && self.prototype_scale >= 0.0
            && self.background_scale.is_finite()
            && self.background_scale >= 0.0)
        {
            return Err(Error::Config("prototype scales must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub scene_width: f64,
    pub scene_height: f64,
    pub objects: ObjectCount,
    pub max_objects: usize,
    pub min_size: f64,
    pub max_size: f64,
    /// Largest width/height ratio of a generated object (and its inverse).
    pub max_aspect: f64,
    /// Rejection-sampling bound on pairwise ground-truth IoU.
    pub max_pair_iou: f64,
    pub feature: FeatureConfig,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            scene_width: 160.0,
            scene_height: 160.0,
            objects: ObjectCount::Poisson { mean: 8.0 },
            max_objects: 20,
            min_size: 24.0,
            max_size: 72.0,
            max_aspect: 2.0,
            max_pair_iou: 0.3,
            feature: FeatureConfig::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scene_width > 0.0 && self.scene_height > 0.0) {
            return Err(Error::Config("scene dimensions must be positive".into()));
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size) {
            return Err(Error::Config("object size range must be non-empty and positive".into()));
        }
        if self.max_size > self.scene_width.min(self.scene_height) {
            return Err(Error::Config("max_size exceeds scene dimensions".into()));
        }
        if !(self.max_aspect >= 1.0) {
            return Err(Error::Config("max_aspect must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.max_pair_iou) {
            return Err(Error::Config("max_pair_iou must be in [0, 1]".into()));
        }
        if let ObjectCount::Poisson { mean } = self.objects {
            if !(mean > 0.0 && mean.is_finite()) {
                return Err(Error::Config("Poisson mean must be positive".into()));
            }
        }
        self.feature.validate()
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        SynthConfig { seed, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureModel {
    pub dim: usize,
    pub prototypes: Vec<Vec<f64>>,
    pub background: Vec<f64>,
    pub noise_base: f64,
    pub noise_novel: f64,
    pub novel_shrink: f64,
    pub cue_noise_gain: f64,
    /// `novel[c]` is true when class `c` belongs to the novel split.
    pub novel: Vec<bool>,
}

impl FeatureModel {
    pub fn new(cfg: &FeatureConfig, split: &ClassSplit, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let n = split.all().into_iter().max().map_or(0, |m| m + 1);
        let mut rng = seeded(seed);
        let mut draw = |scale: f64| -> Vec<f64> {
            (0..cfg.dim)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let mut prototypes: Vec<Vec<f64>> = (0..n).map(|_| draw(cfg.prototype_scale)).collect();
        let background = draw(cfg.background_scale);
        if cfg.objectness_share > 0.0 {
            let shared = draw(cfg.prototype_scale);
            let (a, b) = (cfg.objectness_share.sqrt(), (1.0 - cfg.objectness_share).sqrt());
            for p in &mut prototypes {
                for (x, u) in p.iter_mut().zip(&shared) {
                    *x = a * u + b * *x;
                }
            }
        }
        let mut novel = vec![false; n];
        for &c in split.novel() {
            novel[c] = true;
        }
        Ok(FeatureModel {
            dim: cfg.dim,
            prototypes,
            background,
            noise_base: cfg.noise_base,
            noise_novel: cfg.noise_novel,
            novel_shrink: cfg.novel_shrink,
            cue_noise_gain: cfg.cue_noise_gain,
            novel,
        })
    }

    /// Length of vectors produced by [`box_feature`].
    pub fn feature_len(&self) -> usize {
        self.dim + CUE_DIMS
    }

    pub fn is_novel(&self, c: ClassId) -> bool {
        self.novel.get(c).copied().unwrap_or(false)
    }

    pub fn noise_for(&self, c: ClassId) -> f64 {
        if self.is_novel(c) {
            self.noise_novel
        } else {
            self.noise_base
        }
    }

    /// Prototype actually used for class `c` (novel prototypes are shrunk).
    pub fn effective_prototype(&self, c: ClassId) -> Vec<f64> {
        let s = if self.is_novel(c) { self.novel_shrink } else { 1.0 };
        self.prototypes[c].iter().map(|v| s * v).collect()
    }
}

/// Feature vector of box `b` in `scene`: `dim` appearance entries followed by
/// the four localisation entries. The object driving the feature is the one
/// overlapping `b` most among annotations and unlabeled objects alike.
pub fn box_feature(model: &FeatureModel, scene: &Scene, b: &BBox, rng: &mut LabRng) -> Vec<f64> {
    let mut out = Vec::with_capacity(model.feature_len());
    let best = scene.best_object(b).filter(|&(_, v)| v > 0.0);
    match best {
        None => {
            let sigma = model.noise_base;
            out.extend(
                model
                    .background
                    .iter()
                    .map(|m| m + sigma * rng.sample::<f64, _>(StandardNormal)),
            );
            out.extend([0.0; CUE_DIMS]);
        }
        Some((ann, v)) => {
            let c = ann.class_id;
            let sigma = model.noise_for(c);
            let shrink = if model.is_novel(c) { model.novel_shrink } else { 1.0 };
            for (p, bg) in model.prototypes[c].iter().zip(&model.background) {
                let mean = v * shrink * p + (1.0 - v) * bg;
                out.push(mean + sigma * rng.sample::<f64, _>(StandardNormal));
            }
            let cue = if b.width() > 0.0 && b.height() > 0.0 {
                encode_delta(b, &ann.bbox)
                    .map(|d| d.to_array())
                    .unwrap_or([0.0; CUE_DIMS])
            } else {
                [0.0; CUE_DIMS]
            };
            let cue_sigma = sigma * (1.0 + model.cue_noise_gain * (1.0 - v));
            out.extend(cue.iter().map(|d| d + cue_sigma * rng.sample::<f64, _>(StandardNormal)));
        }
    }
    out
}

fn draw_count(cfg: &SynthConfig, rng: &mut LabRng) -> usize {
    let n = match cfg.objects {
        ObjectCount::Fixed { n } => n,
        ObjectCount::Poisson { mean } => {
            let p = Poisson::new(mean).expect("validated Poisson mean");
            p.sample(rng) as usize
        }
    };
    n.min(cfg.max_objects)
}

const PLACEMENT_ATTEMPTS: usize = 100;

fn generate_scene(cfg: &SynthConfig, classes: &[ClassId], rng: &mut LabRng) -> Scene {
    let (sw, sh) = (cfg.scene_width, cfg.scene_height);
    let mut scene = Scene::empty(sw, sh);
    let count = draw_count(cfg, rng);
    let log_aspect = cfg.max_aspect.ln();
    for _ in 0..count {
        let class_id = classes[rng.random_range(0..classes.len())];
        for _ in 0..PLACEMENT_ATTEMPTS {
            let side = rng.random_range(cfg.min_size..=cfg.max_size);
            let ratio = if log_aspect > 0.0 {
                rng.random_range(-log_aspect..=log_aspect).exp()
            } else {
                1.0
            };
            let w = (side * ratio.sqrt()).min(sw);
            let h = (side / ratio.sqrt()).min(sh);
            let x1 = rng.random_range(0.0..=(sw - w));
            let y1 = rng.random_range(0.0..=(sh - h));
            let bbox = BBox {
                x1,
                y1,
                x2: x1 + w,
                y2: y1 + h,
            };
            if scene
                .annotations
                .iter()
                .all(|a| iou(&a.bbox, &bbox) <= cfg.max_pair_iou)
            {
                scene.annotations.push(Annotation::new(class_id, bbox));
                break;
            }
        }
    }
    scene
}

/// Generates `n_scenes` scenes. Scene `i` draws from its own substream of
/// `cfg.seed`, so the result does not depend on how the work is scheduled.
pub fn generate_dataset(cfg: &SynthConfig, split: &ClassSplit, n_scenes: usize, phase: Phase) -> Result<Vec<Scene>> {
    cfg.validate()?;
    if n_scenes == 0 {
        return Err(Error::Config("n_scenes must be at least 1".into()));
    }
    let classes = split.classes_for(phase);
    if classes.is_empty() {
        return Err(Error::EmptyPhase(phase.name()));
    }
    Ok((0..n_scenes)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(cfg.seed, i as u64);
            generate_scene(cfg, &classes, &mut rng)
        })
        .collect())
}

/// Selects exactly `k` annotated instances of every class in the split.
///
/// Scenes are visited in a seeded random order; each keeps only the
/// annotations still needed and the rest become unlabeled objects of the
/// same image. Scenes left without annotations are dropped. The returned
/// scenes keep their original relative order.
pub fn sample_k_shot(scenes: &[Scene], split: &ClassSplit, k: usize, seed: u64) -> Result<Vec<Scene>> {
    let classes = split.all();
    let mut available: BTreeMap<ClassId, usize> = classes.iter().map(|&c| (c, 0)).collect();
    for a in scenes.iter().flat_map(|s| &s.annotations) {
        if let Some(n) = available.get_mut(&a.class_id) {
            *n += 1;
        }
    }
    for &c in &classes {
        let n = available[&c];
        if n < k {
            return Err(Error::InsufficientInstances {
                class: c,
                available: n,
                requested: k,
            });
        }
    }

    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.shuffle(&mut seeded(seed));
    let mut taken: BTreeMap<ClassId, usize> = classes.iter().map(|&c| (c, 0)).collect();
    let mut picked: Vec<(usize, Scene)> = Vec::new();
    for idx in order {
        let src = &scenes[idx];
        let mut kept = Vec::new();
        let mut dropped = src.unlabeled.clone();
        for a in &src.annotations {
            match taken.get_mut(&a.class_id) {
                Some(n) if *n < k => {
                    *n += 1;
                    kept.push(*a);
                }
                _ => dropped.push(*a),
            }
        }
        if !kept.is_empty() {
            picked.push((
                idx,
                Scene {
                    width: src.width,
                    height: src.height,
                    annotations: kept,
                    unlabeled: dropped,
                },
            ));
        }
        if taken.values().all(|&n| n == k) {
            break;
        }
    }
    picked.sort_by_key(|(i, _)| *i);
    Ok(picked.into_iter().map(|(_, s)| s).collect())
}
