//! Application state machine plus the supervised and refinement phases.

use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};

use crate::annotation::{class_id_by_name, AnnotationRequest, Annotator};
use crate::bootstrap::{retrain_from_store, BootstrapReport};
use crate::config::RunConfig;
use crate::depth::nearest_blob_box;
use crate::detector::{detect, DetectorModels};
use crate::error::{Error, Result};
use crate::evaluation::label_map;
use crate::eventlog::{Event, EventLog};
use crate::frontend::{ProposalSource, ReplaySource};
use crate::geometry::{Detection, LabeledBox};
use crate::selection::{select, DecisionKind};
use crate::store::{DatasetStore, LabelSource};
use crate::tracker::{LabelTracker, Quality};
use crate::world::ExplorationSequence;
use crate::world::FrameRecord;

pub const PHASE_SUPERVISED: &str = "supervised";
pub const PHASE_REFINEMENT: &str = "refinement";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppState {
    #[default]
    Inference,
    SupervisedTrain,
    WeaklySupervisedTrain,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Train { class_name: String },
    Refine { path: PathBuf },
    Stop,
    Status,
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut words = s.split_whitespace();
        let verb = words.next().unwrap_or("");
        let rest: Vec<&str> = words.collect();
        let one_arg = |what: &str| -> Result<String> {
            match rest.as_slice() {
                [a] => Ok(a.to_string()),
                _ => Err(Error::InvalidInput(format!("usage: {verb} <{what}>"))),
            }
        };
        match verb {
            "train" => {
                let class_name = one_arg("class-name")?;
                if class_id_by_name(&class_name).is_none() {
                    return Err(Error::InvalidInput(format!("unknown class {class_name:?}")));
                }
                Ok(Self::Train { class_name })
            }
            "refine" => Ok(Self::Refine {
                path: PathBuf::from(one_arg("sequence-path")?),
            }),
            "stop" if rest.is_empty() => Ok(Self::Stop),
            "status" if rest.is_empty() => Ok(Self::Status),
            "stop" | "status" => Err(Error::InvalidInput(format!("{verb} takes no arguments"))),
            _ => Err(Error::UnknownCommand(s.trim().to_string())),
        }
    }
}

/// Counters of one refinement phase, derived from its logged events.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RefinementStats {
    pub frames_processed: usize,
    pub total_al_queries_images: usize,
    /// Boxes stored for query frames, whoever answered.
    pub total_al_queries_boxes: usize,
    pub human_images: usize,
    pub human_boxes: usize,
    /// Query frames answered by the tracker.
    pub tracker_answers: usize,
    pub ssl_images: usize,
    pub discarded_images: usize,
    pub annotation_timeouts: usize,
    /// mAP of the stored machine-made labels; absent without ground truth.
    pub pseudo_label_map: Option<f64>,
}

impl RefinementStats {
    pub fn apply(&mut self, event: &Event) {
        match event {
            Event::Decision { kind, .. } => {
                self.frames_processed += 1;
                match kind {
                    DecisionKind::QueryHuman => self.total_al_queries_images += 1,
                    DecisionKind::Discard => self.discarded_images += 1,
                    DecisionKind::SelfLabel => self.ssl_images += 1,
                }
            }
            Event::AnnotationReceived { boxes, .. } => {
                self.human_images += 1;
                self.human_boxes += boxes.len();
            }
            Event::LabelsStored { source, boxes, .. } => match source {
                LabelSource::Human => self.total_al_queries_boxes += boxes.len(),
                LabelSource::Tracker => {
                    self.tracker_answers += 1;
                    self.total_al_queries_boxes += boxes.len();
                }
                LabelSource::AutoDepth | LabelSource::SelfSupervised => {}
            },
            Event::AnnotationTimedOut { .. } => self.annotation_timeouts += 1,
            Event::PhaseCompleted {
                pseudo_label_map, ..
            } => self.pseudo_label_map = *pseudo_label_map,
            _ => {}
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatusSnapshot {
    pub state: AppState,
    /// Sequence of the running phase.
    pub sequence: Option<String>,
    pub frames_processed: usize,
    pub frames_total: usize,
    pub stats: RefinementStats,
}

#[derive(Debug, Default)]
struct ControlState {
    snapshot: StatusSnapshot,
    /// A phase body is executing, as opposed to merely requested.
    running: bool,
}

/// Shared view of the state machine: the command channel and the HTTP
/// status route read it while a phase runs.
#[derive(Debug, Default)]
pub struct Controller {
    inner: Mutex<ControlState>,
    stop: AtomicBool,
}

impl Controller {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> MutexGuard<'_, ControlState> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn state(&self) -> AppState {
        self.lock().snapshot.state
    }

    pub fn snapshot(&self) -> StatusSnapshot {
        self.lock().snapshot.clone()
    }

    /// Applies a command to the state machine. `train` and `refine` only
    /// claim the state; the caller then runs the matching phase.
    pub fn handle_command(&self, cmd: &Command) -> Result<AppState> {
        let mut g = self.lock();
        let target = match cmd {
            Command::Status => return Ok(g.snapshot.state),
            Command::Stop => {
                if g.snapshot.state != AppState::Inference {
                    self.stop.store(true, Ordering::SeqCst);
                }
                return Ok(g.snapshot.state);
            }
            Command::Train { .. } => AppState::SupervisedTrain,
            Command::Refine { .. } => AppState::WeaklySupervisedTrain,
        };
        if g.snapshot.state != AppState::Inference {
            return Err(Error::Busy(format!("{:?} is active", g.snapshot.state)));
        }
        g.snapshot.state = target;
        Ok(target)
    }

    /// Enters `phase` unless another phase holds the machine. A state
    /// claimed by a command is taken over by its own phase.
    fn begin(
        self: &Arc<Self>,
        phase: AppState,
        sequence: &str,
        frames_total: usize,
    ) -> Result<PhaseGuard> {
        let mut g = self.lock();
        let s = g.snapshot.state;
        if g.running || !(s == AppState::Inference || s == phase) {
            return Err(Error::Busy(format!("{s:?} is active")));
        }
        g.running = true;
        g.snapshot = StatusSnapshot {
            state: phase,
            sequence: Some(sequence.to_string()),
            frames_processed: 0,
            frames_total,
            stats: RefinementStats::default(),
        };
        self.stop.store(false, Ordering::SeqCst);
        Ok(PhaseGuard {
            controller: Arc::clone(self),
        })
    }

    /// Drops a state claimed by a command whose phase never started.
    pub fn release_claim(&self) {
        let mut g = self.lock();
        if !g.running {
            g.snapshot.state = AppState::Inference;
        }
    }

    pub fn stop_requested(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    fn progress(&self, frames_processed: usize, stats: Option<&RefinementStats>) {
        let mut g = self.lock();
        g.snapshot.frames_processed = frames_processed;
        if let Some(s) = stats {
            g.snapshot.stats = s.clone();
        }
    }
}

/// Returns the machine to Inference when the phase ends, whether it
/// finished, stopped or failed.
struct PhaseGuard {
    controller: Arc<Controller>,
}

impl Drop for PhaseGuard {
    fn drop(&mut self) {
        let mut g = self.controller.lock();
        g.running = false;
        g.snapshot.state = AppState::Inference;
        self.controller.stop.store(false, Ordering::SeqCst);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisedSummary {
    pub sequence: String,
    pub class_id: usize,
    pub frames_labeled: usize,
    /// Frames where no depth blob was found.
    pub frames_skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementOutcome {
    pub stats: RefinementStats,
    /// Ended by a stop command; no retraining took place.
    pub stopped: bool,
}

/// Owns the dataset, the current models and the event log, and runs phases
/// one at a time.
pub struct Engine {
    config: RunConfig,
    store: DatasetStore,
    models: Option<DetectorModels>,
    controller: Arc<Controller>,
    log: Option<EventLog>,
    source: Box<dyn ProposalSource>,
}

impl Engine {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            store: DatasetStore::new(),
            models: None,
            controller: Arc::new(Controller::new()),
            log: None,
            source: Box::new(ReplaySource),
        })
    }

    pub fn with_log(mut self, log: EventLog) -> Self {
        self.log = Some(log);
        self
    }

    pub fn with_controller(mut self, controller: Arc<Controller>) -> Self {
        self.controller = controller;
        self
    }

    pub fn with_store(mut self, store: DatasetStore) -> Self {
        self.store = store;
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn controller(&self) -> Arc<Controller> {
        Arc::clone(&self.controller)
    }

    pub fn store(&self) -> &DatasetStore {
        &self.store
    }

    pub fn models(&self) -> Option<&DetectorModels> {
        self.models.as_ref()
    }

    pub fn set_models(&mut self, models: DetectorModels) {
        self.models = Some(models);
    }

    pub fn proposal_source(&self) -> &dyn ProposalSource {
        self.source.as_ref()
    }

    /// Appends to the event log, if one is attached.
    pub fn record(&mut self, event: Event) -> Result<()> {
        match &mut self.log {
            Some(log) => log.append(event),
            None => Ok(()),
        }
    }

    /// Labels every frame with its nearest depth blob, without retraining.
    pub fn ingest_supervised(
        &mut self,
        name: &str,
        seq: &ExplorationSequence,
        class_id: usize,
    ) -> Result<SupervisedSummary> {
        let _guard = self
            .controller
            .begin(AppState::SupervisedTrain, name, seq.frames.len())?;
        self.ingest(name, seq, class_id)
    }

    fn ingest(
        &mut self,
        name: &str,
        seq: &ExplorationSequence,
        class_id: usize,
    ) -> Result<SupervisedSummary> {
        if class_id >= self.config.world.num_classes {
            return Err(Error::InvalidInput(format!(
                "class {class_id} out of range"
            )));
        }
        if seq.frames.is_empty() {
            return Err(Error::InvalidInput(format!("sequence {name:?} is empty")));
        }
        if let Some(f) = seq.frames.iter().find(|f| f.depth.is_none()) {
            return Err(Error::InvalidInput(format!(
                "frame {} of {name:?} has no depth map",
                f.frame_id
            )));
        }
        self.record(Event::PhaseStarted {
            phase: PHASE_SUPERVISED.into(),
            sequence: name.to_string(),
            frames: seq.frames.len(),
        })?;
        let mut labeled = 0;
        let mut skipped = 0;
        for (i, frame) in seq.frames.iter().enumerate() {
            let depth = frame.depth.as_ref().expect("checked above");
            match nearest_blob_box(depth, &self.config.blob) {
                Ok(bbox) => {
                    let labels = vec![LabeledBox::new(bbox, class_id)];
                    self.store
                        .add(name, frame, labels.clone(), LabelSource::AutoDepth)?;
                    self.record(Event::LabelsStored {
                        frame_id: frame.frame_id,
                        source: LabelSource::AutoDepth,
                        boxes: labels,
                    })?;
                    labeled += 1;
                }
                Err(e @ Error::NoBlob { .. }) => {
                    log::debug!("frame {}: {e}", frame.frame_id);
                    self.record(Event::FrameSkipped {
                        frame_id: frame.frame_id,
                        reason: e.to_string(),
                    })?;
                    skipped += 1;
                }
                Err(e) => return Err(e),
            }
            self.controller.progress(i + 1, None);
        }
        if labeled == 0 {
            return Err(Error::Phase(format!(
                "no frame of {name:?} yielded a depth blob"
            )));
        }
        if skipped > 0 {
            log::warn!(
                "{name}: {skipped} of {} frames had no depth blob",
                seq.frames.len()
            );
        }
        Ok(SupervisedSummary {
            sequence: name.to_string(),
            class_id,
            frames_labeled: labeled,
            frames_skipped: skipped,
        })
    }

    /// Retrains every labeled class from the whole store.
    pub fn retrain(&mut self) -> Result<BootstrapReport> {
        let (models, report) =
            retrain_from_store(&self.store, &self.config.kernel, &self.config.bootstrap)?;
        self.record(Event::Retrained {
            classes: report.classes.iter().map(|c| c.class_id).collect(),
            positives: report.classes.iter().map(|c| c.positives).collect(),
            hard_negatives: report.classes.iter().map(|c| c.hard_negatives).collect(),
        })?;
        self.models = Some(models);
        Ok(report)
    }

    /// Depth-supervised labeling of one handheld sequence followed by a
    /// retrain.
    pub fn run_supervised_phase(
        &mut self,
        name: &str,
        seq: &ExplorationSequence,
        class_id: usize,
    ) -> Result<(SupervisedSummary, BootstrapReport)> {
        let _guard = self
            .controller
            .begin(AppState::SupervisedTrain, name, seq.frames.len())?;
        let summary = self.ingest(name, seq, class_id)?;
        let report = self.retrain()?;
        self.record(Event::PhaseCompleted {
            phase: PHASE_SUPERVISED.into(),
            pseudo_label_map: None,
        })?;
        Ok((summary, report))
    }

    /// Weakly supervised pass over `seq`: every frame is detected and
    /// either self-labeled, discarded or answered by the tracker or the
    /// annotator. Retrains once at the end.
    pub fn run_refinement_phase(
        &mut self,
        name: &str,
        seq: &ExplorationSequence,
        annotator: &mut dyn Annotator,
        tracker: &mut dyn LabelTracker,
    ) -> Result<RefinementOutcome> {
        let _guard =
            self.controller
                .begin(AppState::WeaklySupervisedTrain, name, seq.frames.len())?;
        let models = self
            .models
            .clone()
            .ok_or_else(|| Error::InvalidInput("refinement needs trained models".into()))?;
        let classes = models.class_ids();
        self.record(Event::PhaseStarted {
            phase: PHASE_REFINEMENT.into(),
            sequence: name.to_string(),
            frames: seq.frames.len(),
        })?;
        let mut stats = RefinementStats::default();
        let mut stopped = false;

        for frame in &seq.frames {
            if self.controller.stop_requested() {
                stopped = true;
                break;
            }
            // Tracks follow every frame so their motion model stays current,
            // but their labels are only consulted for query frames.
            let tracked = tracker.is_active().then(|| tracker.propagate(frame));
            let dets = detect(frame, &models, self.source.as_ref(), &self.config.inference)?;
            let decision = select(&dets, &self.config.selection);
            let mut events = vec![Event::Decision {
                frame_id: frame.frame_id,
                kind: decision.kind,
                score: decision.frame_score,
                reason: decision.reason.clone(),
                detections: dets.len(),
            }];
            match decision.kind {
                DecisionKind::Discard => {}
                DecisionKind::SelfLabel => {
                    let labels: Vec<LabeledBox> = dets
                        .iter()
                        .map(|d| LabeledBox::new(d.bbox, d.class_id))
                        .collect();
                    self.store
                        .add(name, frame, labels.clone(), LabelSource::SelfSupervised)?;
                    events.push(Event::LabelsStored {
                        frame_id: frame.frame_id,
                        source: LabelSource::SelfSupervised,
                        boxes: labels,
                    });
                }
                DecisionKind::QueryHuman => {
                    let tracked = tracked.filter(|l| !l.is_empty());
                    let verdict = tracked.as_ref().map(|l| tracker.quality(l));
                    match (tracked, verdict) {
                        (Some(labels), Some(Quality::Ok)) => {
                            self.store
                                .add(name, frame, labels.clone(), LabelSource::Tracker)?;
                            events.push(Event::LabelsStored {
                                frame_id: frame.frame_id,
                                source: LabelSource::Tracker,
                                boxes: labels,
                            });
                        }
                        (_, verdict) => {
                            if verdict == Some(Quality::Low) {
                                events.push(Event::TrackerRejected {
                                    frame_id: frame.frame_id,
                                    reason: "tracker quality low".into(),
                                });
                            }
                            for e in events.drain(..) {
                                stats.apply(&e);
                                self.record(e)?;
                            }
                            self.ask_annotator(
                                name,
                                frame,
                                dets,
                                &classes,
                                annotator,
                                tracker,
                                &mut events,
                            )?;
                        }
                    }
                }
            }
            for e in events {
                stats.apply(&e);
                self.record(e)?;
            }
            self.controller
                .progress(stats.frames_processed, Some(&stats));
        }

        if stopped {
            log::warn!(
                "{name}: stopped after {} frames; models unchanged",
                stats.frames_processed
            );
            self.record(Event::PhaseStopped {
                frames_processed: stats.frames_processed,
            })?;
            return Ok(RefinementOutcome { stats, stopped });
        }

        self.retrain()?;
        stats.pseudo_label_map = self.pseudo_label_map(name, seq);
        self.record(Event::PhaseCompleted {
            phase: PHASE_REFINEMENT.into(),
            pseudo_label_map: stats.pseudo_label_map,
        })?;
        self.controller
            .progress(stats.frames_processed, Some(&stats));
        Ok(RefinementOutcome { stats, stopped })
    }

    /// Pauses on the annotator. Nothing else happens until it answers or
    /// times out.
    #[allow(clippy::too_many_arguments)]
    fn ask_annotator(
        &mut self,
        name: &str,
        frame: &FrameRecord,
        dets: Vec<Detection>,
        classes: &[usize],
        annotator: &mut dyn Annotator,
        tracker: &mut dyn LabelTracker,
        events: &mut Vec<Event>,
    ) -> Result<()> {
        let predicted = dets.len();
        let req = AnnotationRequest::for_frame(frame, dets, classes);
        let request_id = annotator.request(req, frame)?;
        self.record(Event::AnnotationRequested {
            request_id,
            frame_id: frame.frame_id,
            predicted,
        })?;
        match annotator.response() {
            Ok(resp) => {
                let boxes = resp.boxes;
                self.store
                    .add(name, frame, boxes.clone(), LabelSource::Human)?;
                events.push(Event::AnnotationReceived {
                    request_id: resp.request_id,
                    frame_id: frame.frame_id,
                    boxes: boxes.clone(),
                });
                if boxes.is_empty() {
                    tracker.reset();
                } else {
                    tracker.init(&boxes)?;
                }
                events.push(Event::LabelsStored {
                    frame_id: frame.frame_id,
                    source: LabelSource::Human,
                    boxes,
                });
            }
            Err(Error::AnnotationTimeout(t)) => {
                log::warn!(
                    "frame {}: annotation timed out after {t:?}; frame discarded",
                    frame.frame_id
                );
                events.push(Event::AnnotationTimedOut {
                    frame_id: frame.frame_id,
                    message: format!("no response within {t:?}"),
                });
            }
            Err(e) => return Err(e),
        }
        Ok(())
    }

    /// mAP of the tracker and self-supervised labels of `name` against the
    /// sequence ground truth, when the sequence has any.
    fn pseudo_label_map(&self, name: &str, seq: &ExplorationSequence) -> Option<f64> {
        if seq.frames.iter().all(|f| f.ground_truth.is_empty()) {
            return None;
        }
        let labels: Vec<(u64, Vec<LabeledBox>)> = self
            .store
            .frames()
            .iter()
            .filter(|f| {
                f.sequence == name
                    && matches!(f.source, LabelSource::Tracker | LabelSource::SelfSupervised)
            })
            .map(|f| (f.frame.frame_id, f.frame.ground_truth.clone()))
            .collect();
        if labels.is_empty() {
            return None;
        }
        Some(label_map(&labels, seq, &self.config.eval).map)
    }
}
