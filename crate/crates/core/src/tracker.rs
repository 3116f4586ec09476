//! Propagation of human annotations to the following frames, with an
//! overlap-based quality gate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clip_box, iou, BoundingBox, LabeledBox};
use crate::world::FrameRecord;

const VELOCITY_SMOOTHING: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    pub match_iou: f64,
    pub overlap_gate: f64,
    pub max_coast: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            match_iou: 0.3,
            overlap_gate: 0.5,
            max_coast: 5,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if unit(self.match_iou) && unit(self.overlap_gate) {
            Ok(())
        } else {
            Err(Error::Config(
                "match_iou and overlap_gate must lie in (0, 1)".into(),
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub class_id: usize,
    pub bbox: BoundingBox,
    /// Smoothed center displacement in pixels per frame.
    pub velocity: (f64, f64),
    pub age: u64,
    /// Consecutive frames without a matching proposal.
    pub coasting: usize,
    pub healthy: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrackState {
    pub tracks: Vec<Track>,
}

impl TrackState {
    pub fn all_healthy(&self) -> bool {
        self.tracks.iter().all(|t| t.healthy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quality {
    Ok,
    Low,
}

pub fn init_tracks(annotations: &[LabeledBox]) -> Result<TrackState> {
    if annotations.is_empty() {
        return Err(Error::InvalidInput("no annotations to track".into()));
    }
    Ok(TrackState {
        tracks: annotations
            .iter()
            .map(|a| Track {
                class_id: a.class_id,
                bbox: a.bbox,
                velocity: (0.0, 0.0),
                age: 0,
                coasting: 0,
                healthy: true,
            })
            .collect(),
    })
}

/// Moves every track by its velocity and snaps it to the best-overlapping
/// proposal, if any reaches `match_iou`. Returns one label per track.
pub fn propagate(
    state: &TrackState,
    frame: &FrameRecord,
    cfg: &TrackerConfig,
) -> (TrackState, Vec<LabeledBox>) {
    let (fw, fh) = (frame.width as f64, frame.height as f64);
    let tracks: Vec<Track> = state
        .tracks
        .iter()
        .map(|t| {
            let predicted = clip_box(&t.bbox.translated(t.velocity.0, t.velocity.1), fw, fh);
            let best = frame
                .proposals
                .iter()
                .map(|p| (iou(&predicted, &p.bbox), p.bbox))
                .filter(|(v, _)| *v >= cfg.match_iou)
                .fold(None, |acc: Option<(f64, BoundingBox)>, cand| match acc {
                    Some(a) if a.0 >= cand.0 => Some(a),
                    _ => Some(cand),
                });
            let mut next = t.clone();
            next.age += 1;
            match best {
                Some((_, b)) => {
                    let snapped = clip_box(&b, fw, fh);
                    let (ox, oy) = t.bbox.center();
                    let (nx, ny) = snapped.center();
                    next.velocity = (
                        VELOCITY_SMOOTHING * t.velocity.0 + (1.0 - VELOCITY_SMOOTHING) * (nx - ox),
                        VELOCITY_SMOOTHING * t.velocity.1 + (1.0 - VELOCITY_SMOOTHING) * (ny - oy),
                    );
                    next.bbox = snapped;
                    next.coasting = 0;
                }
                None => {
                    next.bbox = predicted;
                    next.coasting += 1;
                    if next.coasting >= cfg.max_coast {
                        next.healthy = false;
                    }
                }
            }
            next
        })
        .collect();
    let labels = tracks
        .iter()
        .map(|t| LabeledBox::new(t.bbox, t.class_id))
        .collect();
    (TrackState { tracks }, labels)
}

/// Low when two different tracks overlap by more than `overlap_gate` or a
/// track has coasted too long.
pub fn quality_gate(labels: &[LabeledBox], state: &TrackState, cfg: &TrackerConfig) -> Quality {
    if !state.all_healthy() {
        return Quality::Low;
    }
    for (i, a) in labels.iter().enumerate() {
        for b in &labels[i + 1..] {
            if iou(&a.bbox, &b.bbox) > cfg.overlap_gate {
                return Quality::Low;
            }
        }
    }
    Quality::Ok
}

/// Pluggable annotation tracker used by the refinement loop.
pub trait LabelTracker: Send {
    /// Discards previous state and starts one track per annotation.
    fn init(&mut self, annotations: &[LabeledBox]) -> Result<()>;

    fn is_active(&self) -> bool;

    fn reset(&mut self);

    /// Advances to `frame` and returns the propagated labels.
    fn propagate(&mut self, frame: &FrameRecord) -> Vec<LabeledBox>;

    fn quality(&self, labels: &[LabeledBox]) -> Quality;
}

/// Appearance-free baseline: constant velocity plus proposal snapping.
#[derive(Debug, Clone, Default)]
pub struct ConstantVelocityTracker {
    cfg: TrackerConfig,
    state: Option<TrackState>,
}

impl ConstantVelocityTracker {
    pub fn new(cfg: TrackerConfig) -> Self {
        Self { cfg, state: None }
    }

    pub fn state(&self) -> Option<&TrackState> {
        self.state.as_ref()
    }
}

impl LabelTracker for ConstantVelocityTracker {
    fn init(&mut self, annotations: &[LabeledBox]) -> Result<()> {
        self.state = Some(init_tracks(annotations)?);
        Ok(())
    }

    fn is_active(&self) -> bool {
        self.state.is_some()
    }

    fn reset(&mut self) {
        self.state = None;
    }

    fn propagate(&mut self, frame: &FrameRecord) -> Vec<LabeledBox> {
        match self.state.take() {
            Some(s) => {
                let (next, labels) = propagate(&s, frame, &self.cfg);
                self.state = Some(next);
                labels
            }
            None => Vec::new(),
        }
    }

    fn quality(&self, labels: &[LabeledBox]) -> Quality {
        match &self.state {
            Some(s) => quality_gate(labels, s, &self.cfg),
            None => Quality::Low,
        }
    }
}
