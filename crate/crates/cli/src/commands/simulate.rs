//! `prlab simulate`: base training, one fine-tuning run per K, and every
//! report artifact.

use std::fmt::Write as _;
use std::path::Path;

use prlab_core::eval::{imbalance_edges, imbalance_report, EvalReport, ImbalanceReport};
use prlab_core::ingest::{detection_records, write_detections_json, write_synthetic_json, AnnotationCorpus};
use prlab_core::protocol::{
    base_train, class_name, evaluate_pass, imbalance_runs, losses_to_csv, run_cell, to_detections, DetectorSummary,
    EvalPass, PassMetrics, World,
};
use prlab_core::Scene;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::commands::write_file;
use crate::config::ExperimentConfig;
use crate::error::CliResult;

/// Contents of `eval.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateReport {
    pub seed: u64,
    pub base: BasePass,
    pub novel: Vec<NovelPass>,
}

/// Base detector evaluated on base-class test scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasePass {
    pub metrics: PassMetrics,
    pub report: EvalReport,
}

/// Fine-tuned detector for one K evaluated on scenes over all classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NovelPass {
    pub k: usize,
    pub gamma_rpn: f64,
    pub metrics: PassMetrics,
    /// RPN proposals split by whether their best-overlap object is a base
    /// or a novel class.
    pub imbalance: ImbalanceReport,
    pub report: EvalReport,
}

/// Contents of `detector.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorsFile {
    pub base: DetectorSummary,
    pub novel: Vec<NovelDetector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NovelDetector {
    pub k: usize,
    pub detector: DetectorSummary,
}

/// Runs the experiment and writes every artifact into `out`.
pub fn simulate(cfg: &ExperimentConfig, out: &Path) -> CliResult<SimulateReport> {
    cfg.validate()?;
    let p = &cfg.protocol;
    let seed = cfg.seed;
    let world = World::build(p, seed)?;
    let (base, base_trace) = base_train(p, &world, seed)?;
    let base_pass = evaluate_pass(&base, &world.base_test, &world.split, &p.eval, seed)?;
    let cells = cfg
        .shots
        .par_iter()
        .map(|&k| run_cell(p, &world, &base, k, p.train.gamma_rpn, seed))
        .collect::<Result<Vec<_>, _>>()?;

    std::fs::create_dir_all(out)?;
    let names: Vec<String> = world.split.all().into_iter().map(class_name).collect();
    let gamma = p.train.effective_gamma();
    let mut novel = Vec::with_capacity(cells.len());
    let mut imbalance_csv = String::from("k,bin_lo,bin_hi,base_per_image,novel_per_image\n");
    for (&k, cell) in cfg.shots.iter().zip(&cells) {
        let (b, n) = imbalance_runs(&cell.pass.outputs, &world.novel_test, &world.split);
        let imbalance = imbalance_report(&b, &n, &imbalance_edges())?;
        for line in imbalance.to_csv().lines().skip(1) {
            let _ = writeln!(imbalance_csv, "{k},{line}");
        }
        write_file(out, &format!("losses_k{k}.csv"), &losses_to_csv(&cell.trace))?;
        write_file(out, &format!("stage_hist_k{k}.csv"), &cell.pass.histogram.to_csv())?;
        write_detections(
            out,
            &format!("detections_k{k}.json"),
            &cell.pass,
            &names,
            &world.novel_test,
        )?;
        novel.push(NovelPass {
            k,
            gamma_rpn: gamma,
            metrics: cell.pass.metrics,
            imbalance,
            report: cell.pass.report.clone(),
        });
    }
    let report = SimulateReport {
        seed,
        base: BasePass {
            metrics: base_pass.metrics,
            report: base_pass.report.clone(),
        },
        novel,
    };
    let detectors = DetectorsFile {
        base: base.summary(),
        novel: cfg
            .shots
            .iter()
            .zip(&cells)
            .map(|(&k, c)| NovelDetector {
                k,
                detector: c.detector.summary(),
            })
            .collect(),
    };

    write_file(out, "config.resolved.json", &cfg.to_resolved_json())?;
    write_file(out, "losses.csv", &losses_to_csv(&base_trace))?;
    write_file(out, "eval.json", &to_json(&report))?;
    write_file(out, "stage_hist.csv", &base_pass.histogram.to_csv())?;
    write_file(out, "imbalance.csv", &imbalance_csv)?;
    write_file(out, "detector.json", &to_json(&detectors))?;
    write_file(out, "base_test.json", &corpus_json(&names, &world.base_test)?)?;
    write_file(out, "novel_test.json", &corpus_json(&names, &world.novel_test)?)?;
    write_detections(out, "detections_base.json", &base_pass, &names, &world.base_test)?;
    Ok(report)
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

fn corpus_json(names: &[String], scenes: &[Scene]) -> CliResult<String> {
    let corpus = AnnotationCorpus::from_scenes(names, scenes)?;
    Ok(write_synthetic_json(&corpus)? + "\n")
}

fn write_detections(out: &Path, file: &str, pass: &EvalPass, names: &[String], scenes: &[Scene]) -> CliResult<()> {
    let corpus = AnnotationCorpus::from_scenes(names, scenes)?;
    let records = detection_records(&to_detections(&pass.outputs), &corpus.scene_ids(), &corpus.classes)?;
    write_file(out, file, &(write_detections_json(&records)? + "\n"))
}

/// Human-readable summary printed after a run.
pub fn summary(report: &SimulateReport) -> String {
    let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    let mut s = String::new();
    let m = &report.base.metrics;
    let _ = writeln!(s, "seed {}", report.seed);
    let _ = writeln!(
        s,
        "base pass     AP50 {}  AP[.5:1] {}  recall {}",
        f(m.base_ap50),
        f(m.base_range_ap),
        f(m.base_recall)
    );
    for n in &report.novel {
        let m = &n.metrics;
        let _ = writeln!(
            s,
            "K={:<3} novel   AP50 {}  AP[.5:1] {}  recall {}  | base AP50 {}",
            n.k,
            f(m.novel_ap50),
            f(m.novel_range_ap),
            f(m.novel_recall),
            f(m.base_ap50)
        );
    }
    s
}
