//! `prlab eval`: scores a detections file against ground truth in any of
//! the supported annotation formats.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use prlab_core::eval::{evaluate, ApMethod, EvalReport, EvalSettings};
use prlab_core::ingest::{
    load_voc_dir, parse_coco_json, parse_voc_xml, read_detections_json, read_synthetic_json, resolve_detections,
    AnnotationCorpus, ClassTable,
};
use prlab_core::proposals::Proposal;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GtFormat {
    /// A directory of PASCAL VOC annotation files, or one such file.
    VocXml,
    /// A COCO annotation file.
    CocoJson,
    /// The synthetic dataset JSON written by `simulate`.
    SyntheticJson,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub gt: PathBuf,
    pub format: GtFormat,
    pub detections: PathBuf,
    pub iou: f64,
    pub range: bool,
    pub recall_k: Option<usize>,
    pub recall_iou: f64,
    pub all_point: bool,
    pub trace: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            gt: PathBuf::new(),
            format: GtFormat::SyntheticJson,
            detections: PathBuf::new(),
            iou: 0.5,
            range: false,
            recall_k: None,
            recall_iou: 0.5,
            all_point: false,
            trace: false,
        }
    }
}

fn input_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::usage(format!("{}: {e}", path.display()))
}

fn read(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| input_error(path, e))
}

/// Loads ground truth in the given format. Anything that does not parse as
/// that format is a usage error.
pub fn load_ground_truth(path: &Path, format: GtFormat) -> CliResult<AnnotationCorpus> {
    let corpus = match format {
        GtFormat::VocXml if path.is_dir() => load_voc_dir(path).map_err(|e| input_error(path, e))?,
        GtFormat::VocXml => {
            let mut corpus = AnnotationCorpus::default();
            let (id, scene) = parse_voc_xml(&read(path)?, &mut corpus.classes).map_err(|e| input_error(path, e))?;
            corpus.scenes.insert(id, scene);
            corpus
        }
        GtFormat::CocoJson => parse_coco_json(&read(path)?).map_err(|e| input_error(path, e))?,
        GtFormat::SyntheticJson => read_synthetic_json(&read(path)?).map_err(|e| input_error(path, e))?,
    };
    Ok(corpus)
}

/// Scores the detections. Recall@k treats the detections of each scene as
/// class-agnostic proposals ranked by score.
pub fn eval(opts: &EvalOptions) -> CliResult<EvalReport> {
    if !(opts.iou > 0.0 && opts.iou <= 1.0) {
        return Err(CliError::usage("--iou must be in (0, 1]"));
    }
    if !(0.0..=1.0).contains(&opts.recall_iou) {
        return Err(CliError::usage("--recall-iou must be in [0, 1]"));
    }
    if opts.recall_k == Some(0) {
        return Err(CliError::usage("--recall-k must be at least 1"));
    }
    let corpus = load_ground_truth(&opts.gt, opts.format)?;
    let records = read_detections_json(&read(&opts.detections)?).map_err(|e| input_error(&opts.detections, e))?;
    let mut classes: ClassTable = corpus.classes.clone();
    let dets = resolve_detections(&records, &corpus, &mut classes).map_err(|e| input_error(&opts.detections, e))?;
    let gts = corpus.ground_truth();
    let settings = EvalSettings {
        iou: opts.iou,
        method: if opts.all_point {
            ApMethod::AllPoint
        } else {
            ApMethod::ElevenPoint
        },
        range: opts.range,
        recall_k: opts.recall_k.unwrap_or(1),
        recall_iou: opts.recall_iou,
        trace: opts.trace,
    };
    let proposals: Option<Vec<Vec<Proposal>>> = opts.recall_k.map(|_| {
        let mut per_scene = vec![Vec::new(); gts.len()];
        for d in &dets {
            per_scene[d.scene].push(Proposal {
                bbox: d.bbox,
                objectness: d.confidence,
                max_gt_iou: 0.0,
                matched_gt: None,
                source_stage: 0,
            });
        }
        per_scene
    });
    let ids = classes.ids();
    let report = evaluate(
        &dets,
        &gts,
        &ids,
        &|c| classes.display(c),
        proposals.as_deref(),
        &settings,
    )?;
    Ok(report)
}
