//! Inference: proposals, per-class scores, calibration, box refinement and
//! suppression.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::ProposalSource;
use crate::geometry::{apply_deltas, clip_box, nms, Detection};
use crate::kernel::{
    calibrate, predict_deltas, predict_raw, rows_to_matrix, ClassifierModel, RefinerModel,
};
use crate::world::io::{read_json, write_json};
use crate::world::FrameRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub score_min: f64,
    pub nms_iou: f64,
    pub top_k: usize,
    /// Confidence is `calibrate(calibration_slope * raw + calibration_offset)`.
    pub calibration_slope: f64,
    pub calibration_offset: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            score_min: 0.05,
            nms_iou: 0.3,
            top_k: 100,
            calibration_slope: 6.0,
            calibration_offset: -3.6,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.score_min) {
            return Err(Error::Config("score_min must lie in [0, 1)".into()));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(Error::Config("nms_iou must lie in (0, 1)".into()));
        }
        if !(self.calibration_slope > 0.0 && self.calibration_slope.is_finite())
            || !self.calibration_offset.is_finite()
        {
            return Err(Error::Config(
                "calibration slope must be positive and offset finite".into(),
            ));
        }
        Ok(())
    }

    pub fn confidence(&self, raw: f64) -> f64 {
        calibrate(self.calibration_slope * raw + self.calibration_offset)
    }
}

/// Classifier and refiner of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassModels {
    pub classifier: ClassifierModel,
    pub refiner: RefinerModel,
}

impl ClassModels {
    pub fn class_id(&self) -> usize {
        self.classifier.class_id
    }
}

/// One model pair per class, ordered by class id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectorModels {
    pub classes: Vec<ClassModels>,
}

impl DetectorModels {
    pub fn new(mut classes: Vec<ClassModels>) -> Self {
        classes.sort_by_key(ClassModels::class_id);
        Self { classes }
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.classes.iter().map(ClassModels::class_id).collect()
    }

    pub fn get(&self, class_id: usize) -> Option<&ClassModels> {
        self.classes.iter().find(|m| m.class_id() == class_id)
    }

    /// Writes `classifier-<c>.json` and `refiner-<c>.json` per class, after
    /// removing model files of classes no longer present.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let keep: Vec<String> = self
            .classes
            .iter()
            .flat_map(|m| {
                let c = m.class_id();
                [format!("classifier-{c}.json"), format!("refiner-{c}.json")]
            })
            .collect();
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            let ours = (name.starts_with("classifier-") || name.starts_with("refiner-"))
                && name.ends_with(".json");
            if ours && !keep.iter().any(|k| k == name) {
                std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
            }
        }
        for m in &self.classes {
            let c = m.class_id();
            write_json(&dir.join(format!("classifier-{c}.json")), &m.classifier)?;
            write_json(&dir.join(format!("refiner-{c}.json")), &m.refiner)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut classes = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            let Some(c) = name
                .strip_prefix("classifier-")
                .and_then(|r| r.strip_suffix(".json"))
            else {
                continue;
            };
            let classifier: ClassifierModel = read_json(&path)?;
            let refiner: RefinerModel = read_json(&dir.join(format!("refiner-{c}.json")))?;
            if classifier.class_id != refiner.class_id {
                return Err(Error::Schema {
                    path,
                    message: "classifier and refiner disagree on class id".into(),
                });
            }
            classes.push(ClassModels {
                classifier,
                refiner,
            });
        }
        if classes.is_empty() {
            return Err(Error::InvalidInput(format!(
                "no models found in {}",
                dir.display()
            )));
        }
        Ok(Self::new(classes))
    }
}

pub fn detect(
    frame: &FrameRecord,
    models: &DetectorModels,
    source: &dyn ProposalSource,
    cfg: &InferenceConfig,
) -> Result<Vec<Detection>> {
    if models.classes.is_empty() {
        return Err(Error::InvalidInput("detector has no class models".into()));
    }
    if frame.proposals.is_empty() && source.id() == "replay" {
        log::warn!("frame {} has no proposals; no detections", frame.frame_id);
        return Ok(Vec::new());
    }
    let proposals = source.propose(frame)?;
    if proposals.is_empty() {
        log::warn!("frame {} has no proposals; no detections", frame.frame_id);
        return Ok(Vec::new());
    }
    let features = rows_to_matrix(
        &proposals
            .iter()
            .map(|p| p.feature.as_slice())
            .collect::<Vec<_>>(),
    )?;
    let (fw, fh) = (frame.width as f64, frame.height as f64);

    let mut candidates = Vec::new();
    for m in &models.classes {
        let raw = predict_raw(&m.classifier, &features)?;
        for (p, r) in proposals.iter().zip(raw) {
            let score = cfg.confidence(r);
            if score >= cfg.score_min {
                let delta = predict_deltas(&m.refiner, &p.feature)?;
                candidates.push(Detection {
                    bbox: clip_box(&apply_deltas(&p.bbox, &delta), fw, fh),
                    class_id: m.class_id(),
                    score,
                });
            }
        }
    }
    let mut kept = nms(&candidates, cfg.nms_iou);
    kept.truncate(cfg.top_k);
    Ok(kept)
}

#[derive(Serialize)]
struct DetectionLine<'a> {
    frame_id: u64,
    class: usize,
    score: f64,
    #[serde(rename = "box")]
    bbox: &'a crate::geometry::BoundingBox,
}

/// Appends one JSON line per detection.
pub fn write_detections_jsonl<W: Write>(
    out: &mut W,
    frame_id: u64,
    dets: &[Detection],
) -> Result<()> {
    for d in dets {
        let line = DetectionLine {
            frame_id,
            class: d.class_id,
            score: d.score,
            bbox: &d.bbox,
        };
        serde_json::to_writer(&mut *out, &line)?;
        out.write_all(b"\n")
            .map_err(|e| Error::io("<detections>", e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::ReplaySource;
    use crate::geometry::{iou, BoundingBox};
    use crate::kernel::KernelConfig;
    use crate::world::Proposal;
    use nalgebra::DMatrix;

    fn unit_model(class_id: usize, center: &[f64], coeff: f64) -> ClassModels {
        ClassModels {
            classifier: ClassifierModel {
                class_id,
                config: KernelConfig {
                    sigma: Some(0.5),
                    ..Default::default()
                },
                centers: DMatrix::from_row_slice(1, center.len(), center),
                coefficients: vec![coeff],
            },
            refiner: RefinerModel {
                class_id,
                weights: DMatrix::zeros(4, center.len() + 1),
                lambda_rls: 1.0,
            },
        }
    }

    fn frame_with(props: Vec<(BoundingBox, Vec<f64>)>) -> FrameRecord {
        FrameRecord {
            frame_id: 7,
            width: 100,
            height: 100,
            ground_truth: vec![],
            proposals: props
                .into_iter()
                .map(|(bbox, feature)| Proposal { bbox, feature })
                .collect(),
            depth: None,
        }
    }

    fn b(x: f64, y: f64, s: f64) -> BoundingBox {
        BoundingBox::new(x, y, s, s).unwrap()
    }

    #[test]
    fn nothing_above_score_min_gives_empty() {
        let models = DetectorModels::new(vec![unit_model(0, &[1.0, 0.0], -5.0)]);
        let f = frame_with(vec![(b(0.0, 0.0, 10.0), vec![1.0, 0.0])]);
        let cfg = InferenceConfig {
            score_min: 0.5,
            ..Default::default()
        };
        assert!(detect(&f, &models, &ReplaySource, &cfg).unwrap().is_empty());
    }

    #[test]
    fn sorted_bounded_and_clipped() {
        let models = DetectorModels::new(vec![
            unit_model(0, &[1.0, 0.0], 2.0),
            unit_model(1, &[0.0, 1.0], 2.0),
        ]);
        let props: Vec<_> = (0..30)
            .map(|i| {
                let t = i as f64 / 29.0;
                (
                    b(3.0 * i as f64, 95.0 - 3.0 * i as f64, 12.0),
                    vec![t, 1.0 - t],
                )
            })
            .collect();
        let f = frame_with(props);
        let cfg = InferenceConfig {
            top_k: 5,
            score_min: 0.0,
            ..Default::default()
        };
        let dets = detect(&f, &models, &ReplaySource, &cfg).unwrap();
        assert_eq!(dets.len(), 5);
        assert!(dets.windows(2).all(|w| w[0].score >= w[1].score));
        assert!(dets.iter().all(|d| d.bbox.within_frame(100.0, 100.0, 1e-9)));
    }

    #[test]
    fn lowering_score_min_keeps_detections() {
        let models = DetectorModels::new(vec![unit_model(0, &[1.0, 0.0], 1.0)]);
        let props: Vec<_> = (0..20)
            .map(|i| {
                (
                    b(4.0 * i as f64, 10.0, 20.0),
                    vec![1.0 - 0.05 * i as f64, 0.0],
                )
            })
            .collect();
        let f = frame_with(props);
        let hi = InferenceConfig {
            score_min: 0.3,
            ..Default::default()
        };
        let lo = InferenceConfig {
            score_min: 0.01,
            ..Default::default()
        };
        let a = detect(&f, &models, &ReplaySource, &hi).unwrap();
        let z = detect(&f, &models, &ReplaySource, &lo).unwrap();
        assert!(!a.is_empty());
        for d in &a {
            assert!(z.contains(d));
        }
    }

    #[test]
    fn empty_proposals_give_empty_result() {
        let models = DetectorModels::new(vec![unit_model(0, &[1.0, 0.0], 1.0)]);
        let f = frame_with(vec![]);
        assert!(
            detect(&f, &models, &ReplaySource, &InferenceConfig::default())
                .unwrap()
                .is_empty()
        );
        assert!(detect(
            &f,
            &DetectorModels::default(),
            &ReplaySource,
            &InferenceConfig::default()
        )
        .is_err());
    }

    #[test]
    fn one_proposal_may_fire_for_two_classes() {
        let models = DetectorModels::new(vec![
            unit_model(0, &[1.0, 0.0], 3.0),
            unit_model(1, &[1.0, 0.0], 3.0),
        ]);
        let f = frame_with(vec![(b(10.0, 10.0, 30.0), vec![1.0, 0.0])]);
        let dets = detect(&f, &models, &ReplaySource, &InferenceConfig::default()).unwrap();
        assert_eq!(dets.len(), 2);
        assert!((iou(&dets[0].bbox, &dets[1].bbox) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn models_round_trip_and_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let models = DetectorModels::new(vec![
            unit_model(3, &[1.0, 0.0], 3.0),
            unit_model(1, &[0.0, 1.0], 1.0),
        ]);
        models.save(dir.path()).unwrap();
        assert_eq!(DetectorModels::load(dir.path()).unwrap(), models);
        std::fs::write(dir.path().join("notes.txt"), "kept").unwrap();
        let fewer = DetectorModels::new(vec![unit_model(1, &[0.0, 1.0], 1.0)]);
        fewer.save(dir.path()).unwrap();
        assert_eq!(DetectorModels::load(dir.path()).unwrap(), fewer);
        assert!(dir.path().join("notes.txt").exists());

        let det = Detection {
            bbox: b(1.0, 2.0, 3.0),
            class_id: 3,
            score: 0.75,
        };
        let mut buf = Vec::new();
        write_detections_jsonl(&mut buf, 9, &[det]).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        assert_eq!(v["frame_id"], 9);
        assert_eq!(v["class"], 3);
        assert_eq!(v["box"]["w"], 3.0);
    }
}
