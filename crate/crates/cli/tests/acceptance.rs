//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the verdict lines always
//! appear in `cargo test` output. Pass criterion numbers as arguments to run
//! a subset, e.g. `cargo test -p prlab-cli --test acceptance -- 1 2 10`.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use prlab_cli::commands::eval::{eval, EvalOptions, GtFormat};
use prlab_core::cascade::{stage_loss_and_grad, stage_step, StageBatch, StageConfig, StageHead, StageHistogram};
use prlab_core::eval::{ap_11point, imbalance_edges, imbalance_report, match_detections, Detection, MatchOutcome};
use prlab_core::geometry::{decode_delta, encode_delta, BBox, BoxDelta};
use prlab_core::ingest::{parse_coco_json, parse_voc_xml, ClassTable};
use prlab_core::proposals::{nms, rpn_loss_and_grad, rpn_step, RpnBatch, RpnHead};
use prlab_core::protocol::{
    base_train, imbalance_runs, losses_to_csv, novel_finetune, run_cell, EvalPass, IterationLoss, ProtocolConfig, World,
};
use prlab_core::{Annotation, Scene};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;

fn main() {
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(u32, &str, fn() -> Verdict); 11] = [
        (1, "metric oracle equivalence", c1_metric_oracle),
        (2, "NMS oracle equivalence", c2_nms_oracle),
        (3, "gradient correctness", c3_gradients),
        (4, "delta codec roundtrip", c4_delta_codec),
        (5, "cascade rebalancing", c5_cascade_rebalancing),
        (6, "imbalance reproduction", c6_imbalance),
        (7, "gamma_rpn ablation direction", c7_gamma_ablation),
        (8, "refinement ablation direction", c8_refinement_ablation),
        (9, "loss-composition audit", c9_loss_audit),
        (10, "parser fixtures and staircase AP", c10_fixtures),
        (11, "determinism", c11_determinism),
    ];
    let mut failed = Vec::new();
    for (id, name, f) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                println!("criterion {id:>2} FAIL  {name}: {detail} [{secs:.1}s]");
                failed.push(id);
            }
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}

fn check(cond: bool, detail: String) -> Verdict {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(budget: Duration, start: Instant) -> Result<f64, String> {
    let secs = start.elapsed().as_secs_f64();
    if start.elapsed() > budget {
        Err(format!("took {secs:.1}s, budget {:.0}s", budget.as_secs_f64()))
    } else {
        Ok(secs)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_box(r: &mut ChaCha8Rng, extent: f64) -> BBox {
    let x1 = r.random_range(0.0..extent * 0.8);
    let y1 = r.random_range(0.0..extent * 0.8);
    let w = r.random_range(2.0..extent * 0.4);
    let h = r.random_range(2.0..extent * 0.4);
    BBox::new(x1, y1, x1 + w, y1 + h).unwrap()
}

fn jitter(r: &mut ChaCha8Rng, b: &BBox, amount: f64) -> BBox {
    let mut d = || r.random_range(-amount..=amount);
    let (x1, y1) = (b.x1 + d(), b.y1 + d());
    let (x2, y2) = (b.x2 + d(), b.y2 + d());
    BBox::new(x1.min(x2 - 0.5), y1.min(y2 - 0.5), x2, y2).unwrap()
}

// --- independent references -------------------------------------------------

fn ref_iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum RefOutcome {
    Tp(usize, f64),
    Ignored(usize),
    Fp,
}

/// Greedy matching written from the definition: visit detections from the
/// highest confidence (earlier index first on ties); each takes the
/// unmatched non-difficult same-class GT of highest IoU (earliest on ties)
/// reaching the threshold; otherwise it is ignored when it reaches a
/// difficult GT, else a false positive.
fn ref_match(dets: &[Detection], gts: &[Annotation], thr: f64) -> Vec<RefOutcome> {
    let mut visited = vec![false; dets.len()];
    let mut taken = vec![false; gts.len()];
    let mut out = vec![RefOutcome::Fp; dets.len()];
    for _ in 0..dets.len() {
        let mut cur: Option<usize> = None;
        for i in 0..dets.len() {
            if visited[i] {
                continue;
            }
            cur = match cur {
                Some(c) if dets[c].confidence >= dets[i].confidence => Some(c),
                _ => Some(i),
            };
        }
        let i = cur.unwrap();
        visited[i] = true;
        let mut best: Option<(usize, f64)> = None;
        let mut ignored = None;
        for (g, gt) in gts.iter().enumerate() {
            let v = ref_iou(&dets[i].bbox, &gt.bbox);
            if gt.class_id != dets[i].class_id || v < thr || v <= 0.0 {
                continue;
            }
            if gt.difficult {
                if ignored.is_none() {
                    ignored = Some(g);
                }
            } else if !taken[g] && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        out[i] = if let Some((g, v)) = best {
            taken[g] = true;
            RefOutcome::Tp(g, v)
        } else if let Some(g) = ignored {
            RefOutcome::Ignored(g)
        } else {
            RefOutcome::Fp
        };
    }
    out
}

/// 11-point AP from the brute-force P-R table, with recall comparisons done
/// in integers.
fn ref_ap11(hits: &[bool], npos: usize) -> Option<f64> {
    if npos == 0 {
        return None;
    }
    let mut table = Vec::new();
    let mut tp = 0usize;
    for (k, &h) in hits.iter().enumerate() {
        tp += h as usize;
        table.push((tp, k + 1));
    }
    let mut sum = 0.0;
    for i in 0..=10usize {
        let mut best = 0.0f64;
        for &(tp, n) in &table {
            if tp * 10 >= i * npos {
                best = best.max(tp as f64 / n as f64);
            }
        }
        sum += best;
    }
    Some(sum / 11.0)
}

// --- criterion 1 -------------------------------------------------------------

fn c1_metric_oracle() -> Verdict {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst = 0.0f64;
    let mut checked_ap = 0;
    for inst in 0..1000 {
        let n_gt = r.random_range(0..=8);
        let n_det = r.random_range(0..=20);
        let classes = r.random_range(1..=2usize);
        let thr = [0.3, 0.5, 0.7, 0.75][r.random_range(0..4)];
        let gts: Vec<Annotation> = (0..n_gt)
            .map(|_| Annotation {
                class_id: r.random_range(0..classes),
                bbox: random_box(&mut r, 100.0),
                difficult: r.random_bool(0.15),
            })
            .collect();
        let dets: Vec<Detection> = (0..n_det)
            .map(|_| {
                let bbox = if !gts.is_empty() && r.random_bool(0.7) {
                    let g = &gts[r.random_range(0..gts.len())];
                    jitter(&mut r, &g.bbox, 6.0)
                } else {
                    random_box(&mut r, 100.0)
                };
                Detection {
                    scene: 0,
                    class_id: r.random_range(0..classes),
                    bbox,
                    // coarse scores so that ties occur
                    confidence: r.random_range(0..8) as f64 / 8.0,
                }
            })
            .collect();
        let got = match_detections(&dets, &gts, thr);
        let want = ref_match(&dets, &gts, thr);
        for (i, (g, w)) in got.outcomes.iter().zip(&want).enumerate() {
            let same = match (g, w) {
                (MatchOutcome::Tp { gt, iou }, RefOutcome::Tp(wg, wv)) => {
                    worst = worst.max((iou - wv).abs());
                    gt == wg && (iou - wv).abs() < 1e-12
                }
                (MatchOutcome::Ignored { gt }, RefOutcome::Ignored(wg)) => gt == wg,
                (MatchOutcome::Fp, RefOutcome::Fp) => true,
                _ => false,
            };
            if !same {
                return Err(format!("instance {inst}, detection {i}: {g:?} vs reference {w:?}"));
            }
        }
        let corpus = vec![gts.clone()];
        for c in 0..classes {
            let got = ap_11point(&dets, &corpus, c, thr).map_err(|e| e.to_string())?;
            let mut order: Vec<usize> = (0..dets.len())
                .filter(|&i| dets[i].class_id == c && !matches!(want[i], RefOutcome::Ignored(_)))
                .collect();
            order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
            let hits: Vec<bool> = order.iter().map(|&i| matches!(want[i], RefOutcome::Tp(..))).collect();
            let npos = gts.iter().filter(|g| g.class_id == c && !g.difficult).count();
            let expected = ref_ap11(&hits, npos);
            match (got, expected) {
                (Some(a), Some(b)) => {
                    worst = worst.max((a - b).abs());
                    if (a - b).abs() >= 1e-12 {
                        return Err(format!("instance {inst}, class {c}: AP {a} vs reference {b}"));
                    }
                    checked_ap += 1;
                }
                (None, None) => {}
                other => return Err(format!("instance {inst}, class {c}: presence mismatch {other:?}")),
            }
        }
    }
    let secs = within(Duration::from_secs(30), start)?;
    Ok(format!(
        "1000 instances, {checked_ap} class APs, max abs error {worst:.1e} (< 1e-12), {secs:.2}s (< 30s)"
    ))
}

// --- criterion 2 -------------------------------------------------------------

fn ref_nms(boxes: &[BBox], scores: &[f64], thresh: f64) -> Vec<usize> {
    let n = boxes.len();
    let mut removed = vec![false; n];
    let mut keep = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if removed[i] {
                continue;
            }
            if best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        keep.push(b);
        removed[b] = true;
        for i in 0..n {
            if !removed[i] && ref_iou(&boxes[i], &boxes[b]) > thresh {
                removed[i] = true;
            }
        }
    }
    keep
}

fn c2_nms_oracle() -> Verdict {
    let start = Instant::now();
    let mut r = rng(2);
    let mut kept = 0usize;
    for inst in 0..1000 {
        let n = r.random_range(0..=50);
        let mut boxes: Vec<BBox> = Vec::with_capacity(n);
        for _ in 0..n {
            let b = if !boxes.is_empty() && r.random_bool(0.5) {
                let base = boxes[r.random_range(0..boxes.len())];
                jitter(&mut r, &base, 5.0)
            } else {
                random_box(&mut r, 100.0)
            };
            boxes.push(b);
        }
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..10) as f64 / 10.0).collect();
        let thresh = r.random_range(0.2..0.8);
        let got = nms(&boxes, &scores, thresh);
        let want = ref_nms(&boxes, &scores, thresh);
        if got != want {
            return Err(format!("instance {inst}: {got:?} vs reference {want:?}"));
        }
        kept += got.len();
    }
    let secs = within(Duration::from_secs(10), start)?;
    Ok(format!(
        "1000 instances, {kept} kept boxes, exact index match, {secs:.2}s (< 10s)"
    ))
}

// --- criterion 3 -------------------------------------------------------------

/// Central differences with h = 1e-6 on losses of order 1 carry rounding
/// noise of about ulp(L) / h ~ 5e-10, so the denominator is floored at
/// `FD_FLOOR`: gradients that cancel exactly (e.g. two L1-regime residuals
/// of opposite sign) must agree to 1e-9 in absolute terms.
const FD_FLOOR: f64 = 1e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR)
}

fn c3_gradients() -> Verdict {
    let mut r = rng(3);
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut worst_step = 0.0f64;
    for batch_no in 0..50 {
        let d = r.random_range(2..=6);
        let mut head = RpnHead::new(d, 0.7, 0.3, 0.5).unwrap();
        for i in 0..head.param_count() {
            *head.param_mut(i) = r.random_range(-1.0..1.0);
        }
        let mut batch = RpnBatch::default();
        for _ in 0..r.random_range(1..=8) {
            let x: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
            let t = r
                .random_bool(0.5)
                .then(|| BoxDelta::from_array(std::array::from_fn(|_| r.random_range(-1.5..1.5))));
            batch.push(x, t);
        }
        let (_, grad) = rpn_loss_and_grad(&head, &batch).map_err(|e| e.to_string())?;
        let analytic = grad.params();
        for i in 0..head.param_count() {
            let mut p = head.clone();
            *p.param_mut(i) += h;
            let mut m = head.clone();
            *m.param_mut(i) -= h;
            let lp = rpn_loss_and_grad(&p, &batch).unwrap().0;
            let lm = rpn_loss_and_grad(&m, &batch).unwrap().0;
            let fd = ((lp.cls + lp.reg) - (lm.cls + lm.reg)) / (2.0 * h);
            let e = rel_err(analytic[i], fd);
            if e >= 1e-5 {
                return Err(format!(
                    "rpn batch {batch_no}, param {i}: analytic {} vs numeric {fd}",
                    analytic[i]
                ));
            }
            worst = worst.max(e);
        }
        // rpn_step applies exactly -(lr * gamma) * grad
        let (lr, gamma) = (r.random_range(0.01..0.5), r.random_range(0.1..1.0));
        let (next, _) = rpn_step(&head, &batch, lr, gamma).unwrap();
        for ((a, b), g) in head.params().iter().zip(next.params()).zip(&analytic) {
            let implied = (a - b) / (lr * gamma);
            if g.abs() > 1e-9 {
                worst_step = worst_step.max(rel_err(implied, *g));
            }
        }
    }
    for batch_no in 0..50 {
        let d = r.random_range(2..=6);
        let classes: Vec<usize> = (0..r.random_range(1..=3)).collect();
        let mut head = StageHead::new(classes.clone(), d);
        for i in 0..head.param_count() {
            *head.param_mut(i) = r.random_range(-1.0..1.0);
        }
        let mut batch = StageBatch::default();
        for _ in 0..r.random_range(1..=8) {
            let x: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
            let row = r.random_range(0..=classes.len());
            batch.features.push(x);
            batch.rows.push(row);
            batch
                .targets
                .push((row > 0).then(|| BoxDelta::from_array(std::array::from_fn(|_| r.random_range(-1.5..1.5)))));
        }
        let (_, grad) = stage_loss_and_grad(&head, &batch).map_err(|e| e.to_string())?;
        let analytic = grad.params();
        for i in 0..head.param_count() {
            let mut p = head.clone();
            *p.param_mut(i) += h;
            let mut m = head.clone();
            *m.param_mut(i) -= h;
            let lp = stage_loss_and_grad(&p, &batch).unwrap().0;
            let lm = stage_loss_and_grad(&m, &batch).unwrap().0;
            let fd = ((lp.cls + lp.reg) - (lm.cls + lm.reg)) / (2.0 * h);
            let e = rel_err(analytic[i], fd);
            if e >= 1e-5 {
                return Err(format!(
                    "stage batch {batch_no}, param {i}: analytic {} vs numeric {fd}",
                    analytic[i]
                ));
            }
            worst = worst.max(e);
        }
        let cfg = StageConfig {
            alpha: 0.5,
            lambda: r.random_range(0.1..1.0),
        };
        let lr = r.random_range(0.01..0.5);
        let (next, _) = stage_step(&head, &cfg, &batch, lr).unwrap();
        for ((a, b), g) in head.params().iter().zip(next.params()).zip(&analytic) {
            let implied = (a - b) / (lr * cfg.lambda);
            if g.abs() > 1e-9 {
                worst_step = worst_step.max(rel_err(implied, *g));
            }
        }
    }
    check(
        worst < 1e-5 && worst_step < 1e-5,
        format!(
            "50 RPN + 50 stage batches, max relative error {worst:.1e} vs central differences; \
             step updates consistent with -lr*scale*grad to {worst_step:.1e}"
        ),
    )
}

// --- criterion 4 -------------------------------------------------------------

fn c4_delta_codec() -> Verdict {
    let mut r = rng(4);
    let mut worst = 0.0f64;
    // Side lengths 8..200 keep every size ratio below exp(DELTA_CLAMP) = 62.5,
    // the range in which decoding is defined to be exact.
    let sized = |r: &mut ChaCha8Rng| {
        let (x1, y1) = (r.random_range(-250.0..250.0), r.random_range(-250.0..250.0));
        let (w, h) = (r.random_range(8.0..200.0), r.random_range(8.0..200.0));
        BBox::new(x1, y1, x1 + w, y1 + h).unwrap()
    };
    for _ in 0..100_000 {
        let a = sized(&mut r);
        let b = sized(&mut r);
        let d = encode_delta(&a, &b).map_err(|e| e.to_string())?;
        let back = decode_delta(&a, &d);
        for (x, y) in back.to_array().iter().zip(b.to_array()) {
            worst = worst.max((x - y).abs());
        }
    }
    check(
        worst < 1e-9,
        format!("1e5 random pairs, max coordinate error {worst:.1e} (< 1e-9)"),
    )
}

// --- criterion 5 -------------------------------------------------------------

/// Share of positive RoIs with IoU >= 0.75 fed to the last stage minus the
/// share fed to the first stage (snapshot T-1 vs snapshot 0), plus the same
/// gap measured on stage outputs (snapshot T vs snapshot 1).
fn stage_gaps(h: &StageHistogram) -> (f64, f64) {
    let s = &h.stages;
    let t = s.len() - 1;
    (
        s[t - 1].share_ge_075 - s[0].share_ge_075,
        s[t].share_ge_075 - s[1].share_ge_075,
    )
}

fn c5_cascade_rebalancing() -> Verdict {
    let start = Instant::now();
    let cfg = ProtocolConfig::default();
    let seed = 0;
    let world = World::build(&cfg, seed).map_err(|e| e.to_string())?;
    let (base, _) = base_train(&cfg, &world, seed).map_err(|e| e.to_string())?;
    let base_pass = prlab_core::protocol::evaluate_pass(&base, &world.base_test, &world.split, &cfg.eval, seed)
        .map_err(|e| e.to_string())?;
    let novel = run_cell(&cfg, &world, &base, 5, cfg.train.gamma_rpn, seed).map_err(|e| e.to_string())?;
    let (b_in, b_out) = stage_gaps(&base_pass.histogram);
    let (n_in, n_out) = stage_gaps(&novel.pass.histogram);
    let secs = within(Duration::from_secs(180), start)?;
    let shares = |h: &StageHistogram| {
        h.stages
            .iter()
            .map(|s| format!("{:.1}%", 100.0 * s.share_ge_075))
            .collect::<Vec<_>>()
            .join("→")
    };
    check(
        b_in >= 0.20 && n_in >= 0.20,
        format!(
            "share IoU>=0.75 fed to stage 3 minus stage 1: base {:+.1} pts, novel {:+.1} pts (>= 20); \
             per snapshot base {} novel {}; output-based gap base {:+.1} novel {:+.1}; {secs:.0}s (< 180s)",
            100.0 * b_in,
            100.0 * n_in,
            shares(&base_pass.histogram),
            shares(&novel.pass.histogram),
            100.0 * b_out,
            100.0 * n_out
        ),
    )
}

// --- criteria 6, 7, 8: one shared paired-seed experiment --------------------

struct SeedRun {
    gamma0: EvalPass,
    gamma_default: EvalPass,
    single_stage: EvalPass,
    imbalance: prlab_core::eval::ImbalanceReport,
    rpn_unchanged: bool,
}

struct Study {
    runs: Vec<SeedRun>,
    gamma: f64,
    elapsed: Duration,
}

const STUDY_SEEDS: u64 = 10;
const STUDY_K: usize = 5;

fn study() -> &'static Result<Study, String> {
    static STUDY: OnceLock<Result<Study, String>> = OnceLock::new();
    STUDY.get_or_init(|| {
        let start = Instant::now();
        let cfg = ProtocolConfig::default();
        let single = cfg.single_stage();
        let gamma = cfg.train.gamma_rpn;
        let runs = (0..STUDY_SEEDS)
            .map(|seed| -> prlab_core::Result<SeedRun> {
                let world = World::build(&cfg, seed)?;
                let (base, _) = base_train(&cfg, &world, seed)?;
                let (base1, _) = base_train(&single, &world, seed)?;
                let g0 = run_cell(&cfg, &world, &base, STUDY_K, 0.0, seed)?;
                let gd = run_cell(&cfg, &world, &base, STUDY_K, gamma, seed)?;
                let t1 = run_cell(&single, &world, &base1, STUDY_K, gamma, seed)?;
                let (b, n) = imbalance_runs(&g0.pass.outputs, &world.novel_test, &world.split);
                Ok(SeedRun {
                    imbalance: imbalance_report(&b, &n, &imbalance_edges())?,
                    rpn_unchanged: g0.detector.rpn.params() == base.rpn.params(),
                    gamma0: g0.pass,
                    gamma_default: gd.pass,
                    single_stage: t1.pass,
                })
            })
            .collect::<prlab_core::Result<Vec<_>>>()
            .map_err(|e| e.to_string())?;
        Ok(Study {
            runs,
            gamma,
            elapsed: start.elapsed(),
        })
    })
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Result<f64, String> {
    let v: Vec<f64> = values
        .collect::<Option<Vec<_>>>()
        .ok_or("metric absent for some seed")?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

fn c6_imbalance() -> Verdict {
    let s = study().as_ref().map_err(Clone::clone)?;
    let share_b = mean(s.runs.iter().map(|r| r.imbalance.base.share_04_06))?;
    let share_n = mean(s.runs.iter().map(|r| r.imbalance.novel.share_04_06))?;
    let ratio_b = mean(s.runs.iter().map(|r| r.imbalance.base.high_low_ratio))?;
    let ratio_n = mean(s.runs.iter().map(|r| r.imbalance.novel.high_low_ratio))?;
    check(
        share_n > share_b && ratio_n < ratio_b,
        format!(
            "gamma=0, K={STUDY_K}, {STUDY_SEEDS} seeds: [0.4,0.6) share novel {:.1}% > base {:.1}%; \
             [0.9,1.0)/[0.4,0.5) novel {:.2}% < base {:.2}%",
            100.0 * share_n,
            100.0 * share_b,
            100.0 * ratio_n,
            100.0 * ratio_b
        ),
    )
}

fn c7_gamma_ablation() -> Verdict {
    let s = study().as_ref().map_err(Clone::clone)?;
    let ap0 = mean(s.runs.iter().map(|r| r.gamma0.metrics.novel_ap50))?;
    let ap1 = mean(s.runs.iter().map(|r| r.gamma_default.metrics.novel_ap50))?;
    let rec0 = mean(s.runs.iter().map(|r| r.gamma0.metrics.novel_recall))?;
    let rec1 = mean(s.runs.iter().map(|r| r.gamma_default.metrics.novel_recall))?;
    let frozen = s.runs.iter().all(|r| r.rpn_unchanged);
    let secs = s.elapsed.as_secs_f64();
    let detail = format!(
        "{STUDY_SEEDS} paired seeds, K={STUDY_K}: novel AP50 {ap0:.4} -> {ap1:.4} (gamma 0 -> {}), \
         novel recall@100 {rec0:.4} -> {rec1:.4}; RPN bitwise unchanged at gamma=0: {frozen}; \
         shared study {secs:.0}s (< 600s)",
        s.gamma
    );
    check(ap1 > ap0 && rec1 > rec0 && frozen && secs < 600.0, detail)
}

fn c8_refinement_ablation() -> Verdict {
    let s = study().as_ref().map_err(Clone::clone)?;
    let t1 = mean(s.runs.iter().map(|r| r.single_stage.metrics.novel_range_ap))?;
    let t3 = mean(s.runs.iter().map(|r| r.gamma_default.metrics.novel_range_ap))?;
    check(
        t3 > t1,
        format!(
            "{STUDY_SEEDS} paired seeds, K={STUDY_K}, gamma {}: novel AP[.5:1] T=1 {t1:.4} -> T=3 {t3:.4} (margin {:+.4})",
            s.gamma,
            t3 - t1
        ),
    )
}

// --- criterion 9 -------------------------------------------------------------

/// The total loss (gamma * RPN + sum of lambda_t * stage t) recomputed from the logged components with the configured
/// coefficients (not the logged ones).
fn audit(trace: &[IterationLoss], gamma: f64, lambdas: &[f64]) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for l in trace {
        if l.stages.len() != lambdas.len() {
            return Err(format!(
                "iteration {}: {} stage losses logged",
                l.iteration,
                l.stages.len()
            ));
        }
        let stages: f64 = l.stages.iter().zip(lambdas).map(|(s, lam)| lam * (s.cls + s.reg)).sum();
        let total = gamma * (l.rpn_cls + l.rpn_reg) + stages;
        worst = worst.max((total - l.total).abs());
    }
    Ok(worst)
}

/// Parses the `total` column and every component back from the CSV trace.
fn csv_totals(csv: &str) -> Vec<f64> {
    csv.lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect()
}

fn c9_loss_audit() -> Verdict {
    let mut cfg = ProtocolConfig::default();
    cfg.train.base_iterations = 100;
    cfg.train.finetune_iterations = 100;
    let seed = 9;
    let world = World::build(&cfg, seed).map_err(|e| e.to_string())?;
    let lambdas: Vec<f64> = cfg.detector.stages.iter().map(|s| s.lambda).collect();
    let (base, base_trace) = base_train(&cfg, &world, seed).map_err(|e| e.to_string())?;
    let shots = world.shots(5).map_err(|e| e.to_string())?;
    let (_, ft_trace) = novel_finetune(&base, &cfg, &world.split, &shots, seed).map_err(|e| e.to_string())?;
    let e_base = audit(&base_trace, 1.0, &lambdas)?;
    let e_ft = audit(&ft_trace, cfg.train.gamma_rpn, &lambdas)?;
    let logged_ok = [&base_trace, &ft_trace].iter().all(|t| {
        csv_totals(&losses_to_csv(t))
            .iter()
            .zip(t.iter())
            .all(|(c, l)| *c == l.total)
    });
    check(
        base_trace.len() == 100 && ft_trace.len() == 100 && e_base < 1e-10 && e_ft < 1e-10 && logged_ok,
        format!(
            "100 base + 100 fine-tune iterations: max |recomputed - reported| {e_base:.1e} / {e_ft:.1e} (< 1e-10); \
             CSV totals identical: {logged_ok}"
        ),
    )
}

// --- criterion 10 ------------------------------------------------------------

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

fn c10_fixtures() -> Verdict {
    let dir = fixtures();
    // VOC: field-by-field comparison
    let mut classes = ClassTable::new();
    let (id1, s1) = parse_voc_xml(&std::fs::read(dir.join("voc/000001.xml")).unwrap(), &mut classes)
        .map_err(|e| format!("000001.xml: {e}"))?;
    let (id2, s2) = parse_voc_xml(&std::fs::read(dir.join("voc/000002.xml")).unwrap(), &mut classes)
        .map_err(|e| format!("000002.xml: {e}"))?;
    let expect1 = Scene {
        width: 500.0,
        height: 375.0,
        annotations: vec![Annotation {
            class_id: 0,
            bbox: bx(48.0, 240.0, 195.0, 371.0),
            difficult: false,
        }],
        unlabeled: vec![],
    };
    let expect2 = Scene {
        width: 335.0,
        height: 500.0,
        annotations: vec![
            Annotation {
                class_id: 1,
                bbox: bx(8.5, 12.0, 334.0, 498.0),
                difficult: false,
            },
            Annotation {
                class_id: 0,
                bbox: bx(100.0, 200.0, 150.0, 260.0),
                difficult: true,
            },
        ],
        unlabeled: vec![],
    };
    if (id1.as_str(), id2.as_str()) != ("000001", "000002") || s1 != expect1 || s2 != expect2 {
        return Err(format!("VOC mismatch: {id1} {s1:?}; {id2} {s2:?}"));
    }
    if classes.names() != ["dog", "person"] {
        return Err(format!("VOC class table {:?}", classes.names()));
    }
    // COCO: corner conversion, dense ids, crowd flag
    let coco = parse_coco_json(&std::fs::read(dir.join("coco.json")).unwrap()).map_err(|e| format!("coco: {e}"))?;
    let scene = coco.scenes.get("42").ok_or("coco: scene 42 missing")?;
    let expect_coco = Scene {
        width: 640.0,
        height: 480.0,
        annotations: vec![
            Annotation {
                class_id: 1,
                bbox: bx(10.5, 20.0, 110.5, 70.25),
                difficult: false,
            },
            Annotation {
                class_id: 0,
                bbox: bx(300.0, 100.0, 340.0, 220.0),
                difficult: true,
            },
        ],
        unlabeled: vec![],
    };
    if coco.scenes.len() != 1 || *scene != expect_coco || coco.classes.names() != ["person", "dog"] {
        return Err(format!("COCO mismatch: {coco:?}"));
    }
    // cmd_eval on the staircase, in-process and through the binary
    let hand_11 = (3.0 * 1.0 + 3.0 * (2.0 / 3.0) + 2.0 * 0.6) / 11.0;
    let hand_all = 0.25 * 1.0 + 0.25 * (2.0 / 3.0) + 0.25 * 0.6;
    let opts = EvalOptions {
        gt: dir.join("staircase/gt.json"),
        format: GtFormat::SyntheticJson,
        detections: dir.join("staircase/detections.json"),
        ..EvalOptions::default()
    };
    let ap11 = eval(&opts).map_err(|e| e.to_string())?.map.ok_or("no AP")?;
    let ap_all = eval(&EvalOptions {
        all_point: true,
        ..opts.clone()
    })
    .map_err(|e| e.to_string())?
    .map
    .ok_or("no AP")?;
    let tmp = tempfile::tempdir().unwrap();
    let report_path = tmp.path().join("report.json");
    let status = Command::new(env!("CARGO_BIN_EXE_prlab"))
        .args(["eval", "--format", "synthetic-json", "--gt"])
        .arg(&opts.gt)
        .arg("--detections")
        .arg(&opts.detections)
        .arg("--out")
        .arg(&report_path)
        .output()
        .map_err(|e| e.to_string())?;
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&report_path).map_err(|e| format!("report: {e}"))?)
            .map_err(|e| e.to_string())?;
    let cli_ap = report["map"].as_f64().ok_or("report has no map")?;
    check(
        ap11 == hand_11 && ap_all == hand_all && cli_ap == hand_11 && status.status.code() == Some(0),
        format!(
            "VOC (2 files) and COCO fixtures field-exact; staircase 11-point AP {ap11} (hand {hand_11}), \
             all-point {ap_all} (hand {hand_all}), `prlab eval` exit {:?} AP {cli_ap}",
            status.status.code()
        ),
    )
}

// --- criterion 11 ------------------------------------------------------------

const DETERMINISM_CONFIG: &str = r#"{
  "seed": 3,
  "shots": [1, 5],
  "protocol": {
    "data": {"base_train_scenes": 120, "base_test_scenes": 30, "novel_pool_scenes": 120, "novel_test_scenes": 30},
    "train": {"base_iterations": 300, "finetune_iterations": 60}
  }
}"#;

fn simulate_into(config: &Path, out: &Path, threads: &str) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_prlab"))
        .args(["simulate", "--seed", "7", "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .env("PRLAB_THREADS", threads)
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.code() != Some(0) {
        return Err(format!(
            "simulate exited {:?}: {}",
            o.status.code(),
            String::from_utf8_lossy(&o.stderr)
        ));
    }
    Ok(())
}

fn read_dir(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect()
}

fn c11_determinism() -> Verdict {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = tmp.path().join("config.json");
    std::fs::write(&config, DETERMINISM_CONFIG).map_err(|e| e.to_string())?;
    let runs = [("a", "1"), ("b", "1"), ("c", "4")];
    for (name, threads) in runs {
        simulate_into(&config, &tmp.path().join(name), threads)?;
    }
    let a = read_dir(&tmp.path().join("a"));
    let b = read_dir(&tmp.path().join("b"));
    let c = read_dir(&tmp.path().join("c"));
    let bytes: usize = a.values().map(Vec::len).sum();
    let diff = |x: &BTreeMap<String, Vec<u8>>| -> Vec<String> {
        a.keys()
            .chain(x.keys())
            .filter(|k| a.get(*k) != x.get(*k))
            .cloned()
            .collect()
    };
    let (ab, ac) = (diff(&b), diff(&c));
    check(
        ab.is_empty() && ac.is_empty() && a.len() >= 6,
        format!(
            "`prlab simulate --seed 7`: {} files ({bytes} bytes) identical across two runs (differing: {ab:?}) \
             and PRLAB_THREADS=1 vs 4 (differing: {ac:?})",
            a.len()
        ),
    )
}
