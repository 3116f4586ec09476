//! VOC 2007 style evaluation (11-point interpolated AP at IoU 0.5) and the
//! before/after experiment report.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::detector::{detect, DetectorModels, InferenceConfig};
use crate::error::{Error, Result};
use crate::frontend::ProposalSource;
use crate::geometry::{iou, Detection, LabeledBox};
use crate::orchestrator::RefinementStats;
use crate::world::ExplorationSequence;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresh: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { iou_thresh: 0.5 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_thresh > 0.0 && self.iou_thresh < 1.0 {
            Ok(())
        } else {
            Err(Error::Config("iou_thresh must lie in (0, 1)".into()))
        }
    }
}

/// A detection tagged with its frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDetection {
    pub frame_id: u64,
    pub det: Detection,
}

/// Outcome of one detection after ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankedMatch {
    /// Position of the detection in the input slice.
    pub index: usize,
    pub true_positive: bool,
}

/// Greedy VOC matching. Detections are ranked by descending score (ties by
/// frame id, then input position); each takes the unmatched same-class box
/// of its frame with the highest IoU, if that IoU reaches `iou_thresh`.
pub fn match_detections(
    dets: &[FrameDetection],
    gts: &HashMap<u64, Vec<LabeledBox>>,
    iou_thresh: f64,
) -> Vec<RankedMatch> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .det
            .score
            .total_cmp(&dets[a].det.score)
            .then(dets[a].frame_id.cmp(&dets[b].frame_id))
            .then(a.cmp(&b))
    });
    let mut used: HashMap<u64, Vec<bool>> = HashMap::new();
    order
        .into_iter()
        .map(|i| {
            let d = &dets[i];
            let frame_gts = gts.get(&d.frame_id).map(Vec::as_slice).unwrap_or(&[]);
            let taken = used
                .entry(d.frame_id)
                .or_insert_with(|| vec![false; frame_gts.len()]);
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in frame_gts.iter().enumerate() {
                if g.class_id != d.det.class_id || taken[gi] {
                    continue;
                }
                let v = iou(&d.det.bbox, &g.bbox);
                if v >= iou_thresh && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((gi, v));
                }
            }
            if let Some((gi, _)) = best {
                taken[gi] = true;
            }
            RankedMatch {
                index: i,
                true_positive: best.is_some(),
            }
        })
        .collect()
}

/// 11-point interpolated AP over ranked TP/FP flags. `None` when there is
/// nothing to find.
pub fn average_precision(flags: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    // (tp, rank) after each detection
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(flags.len());
    for (k, &f) in flags.iter().enumerate() {
        tp += usize::from(f);
        points.push((tp, k + 1));
    }
    let mut sum = 0.0;
    for i in 0..=10usize {
        let p = points
            .iter()
            .filter(|(t, _)| 10 * t >= i * n_gt)
            .map(|&(t, k)| t as f64 / k as f64)
            .fold(0.0, f64::max);
        sum += p;
    }
    Some(sum / 11.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEval {
    pub class_id: usize,
    pub ap: Option<f64>,
    pub n_gt: usize,
    pub n_detections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<ClassEval>,
    /// Mean AP over classes with ground truth; 0 when there are none.
    pub map: f64,
}

/// Evaluates detections of each frame against that frame's ground truth.
pub fn evaluate(
    dets_by_frame: &[(u64, Vec<Detection>)],
    gts_by_frame: &[(u64, Vec<LabeledBox>)],
    cfg: &EvalConfig,
) -> EvalReport {
    let gts: HashMap<u64, Vec<LabeledBox>> = gts_by_frame.iter().cloned().collect();
    let mut classes: BTreeSet<usize> = BTreeSet::new();
    classes.extend(
        gts_by_frame
            .iter()
            .flat_map(|(_, g)| g.iter().map(|l| l.class_id)),
    );
    classes.extend(
        dets_by_frame
            .iter()
            .flat_map(|(_, d)| d.iter().map(|x| x.class_id)),
    );

    let mut per_class: BTreeMap<usize, Vec<FrameDetection>> = BTreeMap::new();
    for (frame_id, dets) in dets_by_frame {
        for d in dets {
            per_class
                .entry(d.class_id)
                .or_default()
                .push(FrameDetection {
                    frame_id: *frame_id,
                    det: *d,
                });
        }
    }

    let evals: Vec<ClassEval> = classes
        .into_iter()
        .map(|c| {
            let n_gt = gts_by_frame
                .iter()
                .map(|(_, g)| g.iter().filter(|l| l.class_id == c).count())
                .sum();
            let dets = per_class.remove(&c).unwrap_or_default();
            let flags: Vec<bool> = match_detections(&dets, &gts, cfg.iou_thresh)
                .into_iter()
                .map(|m| m.true_positive)
                .collect();
            ClassEval {
                class_id: c,
                ap: average_precision(&flags, n_gt),
                n_gt,
                n_detections: dets.len(),
            }
        })
        .collect();
    let aps: Vec<f64> = evals.iter().filter_map(|e| e.ap).collect();
    let map = if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    };
    EvalReport {
        classes: evals,
        map,
    }
}

/// Runs the detector over a sequence and evaluates against its ground truth.
pub fn evaluate_models(
    models: &DetectorModels,
    seq: &ExplorationSequence,
    source: &dyn ProposalSource,
    inference: &InferenceConfig,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let mut dets = Vec::with_capacity(seq.frames.len());
    let mut gts = Vec::with_capacity(seq.frames.len());
    for f in &seq.frames {
        dets.push((f.frame_id, detect(f, models, source, inference)?));
        gts.push((f.frame_id, f.ground_truth.clone()));
    }
    Ok(evaluate(&dets, &gts, cfg))
}

/// Scores machine-made labels against the true boxes of the same frames.
/// Every label counts as a detection of confidence 1.
pub fn label_map(
    labels_by_frame: &[(u64, Vec<LabeledBox>)],
    seq: &ExplorationSequence,
    cfg: &EvalConfig,
) -> EvalReport {
    let labeled: BTreeSet<u64> = labels_by_frame.iter().map(|(id, _)| *id).collect();
    let dets: Vec<(u64, Vec<Detection>)> = labels_by_frame
        .iter()
        .map(|(id, ls)| {
            let d = ls
                .iter()
                .map(|l| Detection {
                    bbox: l.bbox,
                    class_id: l.class_id,
                    score: 1.0,
                })
                .collect();
            (*id, d)
        })
        .collect();
    let gts: Vec<(u64, Vec<LabeledBox>)> = seq
        .frames
        .iter()
        .filter(|f| labeled.contains(&f.frame_id))
        .map(|f| (f.frame_id, f.ground_truth.clone()))
        .collect();
    evaluate(&dets, &gts, cfg)
}

/// One row per object group, mirroring the before/after, annotation-cost and
/// unseen-sequence tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRow {
    pub group: String,
    pub before_map: f64,
    pub after_map: f64,
    pub human_images: usize,
    pub human_boxes: usize,
    pub al_queries: usize,
    pub ssl_images: usize,
    pub pseudo_label_map: Option<f64>,
    pub heldout_before: f64,
    pub heldout_after: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn experiment_report(
    group: &str,
    before: &DetectorModels,
    after: &DetectorModels,
    eval_seq: &ExplorationSequence,
    held_out: &ExplorationSequence,
    stats: &RefinementStats,
    source: &dyn ProposalSource,
    inference: &InferenceConfig,
    cfg: &EvalConfig,
) -> Result<ReportRow> {
    let m = |models: &DetectorModels, seq: &ExplorationSequence| {
        evaluate_models(models, seq, source, inference, cfg).map(|r| r.map)
    };
    Ok(ReportRow {
        group: group.to_string(),
        before_map: m(before, eval_seq)?,
        after_map: m(after, eval_seq)?,
        human_images: stats.human_images,
        human_boxes: stats.human_boxes,
        al_queries: stats.total_al_queries_images,
        ssl_images: stats.ssl_images,
        pseudo_label_map: stats.pseudo_label_map,
        heldout_before: m(before, held_out)?,
        heldout_after: m(after, held_out)?,
    })
}

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

/// Aligned-column table, mAP values in percent.
pub fn render_table(rows: &[ReportRow]) -> String {
    let header = [
        "group",
        "before",
        "after",
        "human img",
        "human box",
        "AL queries",
        "SSL img",
        "pseudo",
        "unseen before",
        "unseen after",
    ];
    let body: Vec<[String; 10]> = rows
        .iter()
        .map(|r| {
            [
                r.group.clone(),
                pct(r.before_map),
                pct(r.after_map),
                r.human_images.to_string(),
                r.human_boxes.to_string(),
                r.al_queries.to_string(),
                r.ssl_images.to_string(),
                r.pseudo_label_map.map_or("-".into(), pct),
                pct(r.heldout_before),
                pct(r.heldout_after),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |cells: &mut dyn Iterator<Item = &str>, out: &mut String| {
        let parts: Vec<String> = cells
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| {
                if i == 0 {
                    format!("{c:<w$}")
                } else {
                    format!("{c:>w$}")
                }
            })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut header.iter().copied(), &mut out);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    let _ = writeln!(out, "{}", rule.join("  "));
    for row in &body {
        line(&mut row.iter().map(String::as_str), &mut out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundingBox;
    use proptest::prelude::*;

    fn bx(x: f64) -> BoundingBox {
        BoundingBox::new(x, 0.0, 10.0, 10.0).unwrap()
    }

    fn det(frame_id: u64, x: f64, score: f64) -> FrameDetection {
        FrameDetection {
            frame_id,
            det: Detection {
                bbox: bx(x),
                class_id: 0,
                score,
            },
        }
    }

    fn gt_map(entries: &[(u64, f64)]) -> HashMap<u64, Vec<LabeledBox>> {
        let mut m: HashMap<u64, Vec<LabeledBox>> = HashMap::new();
        for &(f, x) in entries {
            m.entry(f).or_default().push(LabeledBox::new(bx(x), 0));
        }
        m
    }

    fn flags(m: &[RankedMatch]) -> Vec<bool> {
        m.iter().map(|r| r.true_positive).collect()
    }

    #[test]
    fn matching_cases() {
        let gts = gt_map(&[(0, 0.0)]);
        // IoU 0.9 requires overlap 9.4737 of 10 → shift ~0.526
        let m = match_detections(&[det(0, 0.5263157894736842, 0.7)], &gts, 0.5);
        assert_eq!(flags(&m), vec![true]);

        let m = match_detections(&[det(0, 1.0, 0.8), det(0, 0.0, 0.9)], &gts, 0.5);
        assert_eq!(m[0].index, 1);
        assert_eq!(flags(&m), vec![true, false]);

        // shift 10/3 gives intersection 20/3, union 40/3, IoU exactly 0.5
        let x = 10.0 / 3.0;
        let v = iou(&bx(0.0), &bx(x));
        assert!((v - 0.5).abs() < 1e-15);
        let m = match_detections(&[det(0, x, 0.5)], &gts, v);
        assert_eq!(flags(&m), vec![true]);
    }

    #[test]
    fn ties_break_by_frame_then_input() {
        let gts = gt_map(&[(0, 0.0), (1, 0.0)]);
        let m = match_detections(
            &[det(1, 0.0, 0.5), det(0, 0.0, 0.5), det(0, 0.0, 0.5)],
            &gts,
            0.5,
        );
        assert_eq!(m.iter().map(|r| r.index).collect::<Vec<_>>(), vec![1, 2, 0]);
        assert_eq!(flags(&m), vec![true, false, true]);
    }

    #[test]
    fn ap_cases() {
        assert_eq!(average_precision(&[true, true, true], 3), Some(1.0));
        assert_eq!(average_precision(&[true, false], 1), Some(1.0));
        let v = average_precision(&[true, false], 2).unwrap();
        assert!((v - 6.0 / 11.0).abs() <= 1e-9);
        assert_eq!(average_precision(&[false], 0), None);
        assert_eq!(average_precision(&[], 4), Some(0.0));
    }

    #[test]
    fn evaluate_cases() {
        let gts = vec![(
            0,
            vec![LabeledBox::new(bx(0.0), 0), LabeledBox::new(bx(30.0), 2)],
        )];
        let none = evaluate(&[(0, vec![])], &gts, &EvalConfig::default());
        assert_eq!(none.map, 0.0);
        let perfect: Vec<Detection> = gts[0]
            .1
            .iter()
            .map(|g| Detection {
                bbox: g.bbox,
                class_id: g.class_id,
                score: 1.0,
            })
            .collect();
        let r = evaluate(&[(0, perfect)], &gts, &EvalConfig::default());
        assert_eq!(r.map, 1.0);
        assert_eq!(r.classes.len(), 2);

        // detections of a class absent from ground truth do not count
        let stray = vec![Detection {
            bbox: bx(60.0),
            class_id: 7,
            score: 0.9,
        }];
        let r = evaluate(&[(0, stray)], &gts, &EvalConfig::default());
        assert_eq!(r.classes.iter().find(|c| c.class_id == 7).unwrap().ap, None);
        assert_eq!(r.map, 0.0);
    }

    #[test]
    fn table_has_all_rows() {
        let row = ReportRow {
            group: "#0".into(),
            before_map: 0.144,
            after_map: 0.906,
            human_images: 4,
            human_boxes: 12,
            al_queries: 150,
            ssl_images: 40,
            pseudo_label_map: Some(0.9),
            heldout_before: 0.36,
            heldout_after: 0.758,
        };
        let t = render_table(&[row.clone(), row]);
        assert_eq!(t.lines().count(), 4);
        assert!(t.contains("90.6"));
        let lens: Vec<usize> = t.lines().map(str::len).collect();
        assert_eq!(lens[2], lens[3]);
    }

    proptest! {
        #[test]
        fn ap_is_rank_only(scores in prop::collection::vec(0.01f64..1.0, 1..20), scale in 0.1f64..10.0) {
            let gts = gt_map(&[(0, 0.0), (1, 0.0)]);
            let dets: Vec<FrameDetection> = scores
                .iter()
                .enumerate()
                .map(|(i, s)| det((i % 3) as u64, (i % 4) as f64 * 2.0, *s))
                .collect();
            let scaled: Vec<FrameDetection> = dets
                .iter()
                .map(|d| FrameDetection { det: Detection { score: d.det.score * scale, ..d.det }, ..d.clone() })
                .collect();
            let a = average_precision(&flags(&match_detections(&dets, &gts, 0.5)), 2);
            let b = average_precision(&flags(&match_detections(&scaled, &gts, 0.5)), 2);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn trailing_fp_never_helps(f in prop::collection::vec(any::<bool>(), 0..20), n_extra in 0usize..5) {
            let n_gt = f.iter().filter(|x| **x).count() + n_extra;
            prop_assume!(n_gt > 0);
            let mut g = f.clone();
            g.push(false);
            prop_assert!(average_precision(&g, n_gt).unwrap() <= average_precision(&f, n_gt).unwrap());
        }
    }
}
