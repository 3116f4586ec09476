//! Append-only JSON-lines event log. The refinement statistics are a pure
//! function of the logged events, so a log can be replayed to audit a run.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::ReportRow;
use crate::geometry::LabeledBox;
use crate::orchestrator::RefinementStats;
use crate::selection::DecisionKind;
use crate::store::LabelSource;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    PhaseStarted {
        phase: String,
        sequence: String,
        frames: usize,
    },
    Decision {
        frame_id: u64,
        kind: DecisionKind,
        score: f64,
        reason: String,
        detections: usize,
    },
    LabelsStored {
        frame_id: u64,
        source: LabelSource,
        boxes: Vec<LabeledBox>,
    },
    TrackerRejected {
        frame_id: u64,
        reason: String,
    },
    AnnotationRequested {
        request_id: u64,
        frame_id: u64,
        predicted: usize,
    },
    AnnotationReceived {
        request_id: u64,
        frame_id: u64,
        boxes: Vec<LabeledBox>,
    },
    AnnotationTimedOut {
        frame_id: u64,
        message: String,
    },
    FrameSkipped {
        frame_id: u64,
        reason: String,
    },
    Retrained {
        classes: Vec<usize>,
        positives: Vec<usize>,
        hard_negatives: Vec<usize>,
    },
    PhaseStopped {
        frames_processed: usize,
    },
    PhaseCompleted {
        phase: String,
        pseudo_label_map: Option<f64>,
    },
    /// Before/after mAP of a refinement run, on its own sequence and on an
    /// unseen one.
    Evaluated {
        group: String,
        before_map: f64,
        after_map: f64,
        heldout_before: f64,
        heldout_after: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub seq: u64,
    /// Unix time in milliseconds.
    pub ts: u64,
    #[serde(flatten)]
    pub event: Event,
}

/// Writer side of the log. Each entry is serialized in full before a single
/// write, so a crash can at worst leave one partial trailing line.
#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    file: File,
    next_seq: u64,
}

impl EventLog {
    /// Opens `path` for appending, continuing the sequence numbers of any
    /// entries already present.
    /// A corrupt trailing line is cut off first so new entries start on a
    /// clean line.
    pub fn open(path: &Path) -> Result<Self> {
        let mut next_seq = 0;
        if path.exists() {
            let contents = read_log(path)?;
            next_seq = contents.entries.last().map_or(0, |e| e.seq + 1);
            if let Some(tail) = contents.corrupt_tail {
                let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
                let keep = text
                    .windows(tail.len().max(1))
                    .rposition(|w| w == tail.as_bytes())
                    .unwrap_or(text.len());
                let f = OpenOptions::new()
                    .write(true)
                    .open(path)
                    .map_err(|e| Error::io(path, e))?;
                f.set_len(keep as u64).map_err(|e| Error::io(path, e))?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            next_seq,
        })
    }

    pub fn append(&mut self, event: Event) -> Result<()> {
        let ts = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64);
        let entry = LogEntry {
            seq: self.next_seq,
            ts,
            event,
        };
        let mut line = serde_json::to_vec(&entry)?;
        line.push(b'\n');
        self.file
            .write_all(&line)
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))?;
        self.next_seq += 1;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogContents {
    pub entries: Vec<LogEntry>,
    /// A final line that did not parse, e.g. after a crash mid-write.
    pub corrupt_tail: Option<String>,
}

/// Reads a log, tolerating a corrupt last line. Corruption anywhere else is
/// a schema error.
pub fn read_log(path: &Path) -> Result<LogContents> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(path, e))?;
    let last = lines.iter().rposition(|l| !l.trim().is_empty());
    let mut entries = Vec::with_capacity(lines.len());
    let mut corrupt_tail = None;
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<LogEntry>(line) {
            Ok(e) => entries.push(e),
            Err(_) if Some(i) == last => corrupt_tail = Some(line.clone()),
            Err(e) => {
                return Err(Error::Schema {
                    path: path.to_path_buf(),
                    message: format!("line {}: {e}", i + 1),
                })
            }
        }
    }
    Ok(LogContents {
        entries,
        corrupt_tail,
    })
}

/// Statistics of every refinement phase in the log, in order.
pub fn replay_refinement_stats(entries: &[LogEntry]) -> Vec<RefinementStats> {
    let mut out = Vec::new();
    let mut current: Option<RefinementStats> = None;
    for e in entries {
        match &e.event {
            Event::PhaseStarted { phase, .. } if phase == "refinement" => {
                out.extend(current.replace(RefinementStats::default()));
            }
            Event::PhaseCompleted {
                phase,
                pseudo_label_map,
            } if phase == "refinement" => {
                if let Some(mut s) = current.take() {
                    s.pseudo_label_map = *pseudo_label_map;
                    out.push(s);
                }
            }
            Event::PhaseStopped { .. } => out.extend(current.take()),
            ev => {
                if let Some(s) = current.as_mut() {
                    s.apply(ev);
                }
            }
        }
    }
    out.extend(current);
    out
}

/// Report rows for every evaluated refinement run in the log, each paired
/// with the statistics of the refinement phase preceding it.
pub fn replay_report_rows(entries: &[LogEntry]) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for (i, e) in entries.iter().enumerate() {
        if let Event::Evaluated {
            group,
            before_map,
            after_map,
            heldout_before,
            heldout_after,
        } = &e.event
        {
            let stats = replay_refinement_stats(&entries[..i])
                .pop()
                .unwrap_or_default();
            rows.push(ReportRow {
                group: group.clone(),
                before_map: *before_map,
                after_map: *after_map,
                human_images: stats.human_images,
                human_boxes: stats.human_boxes,
                al_queries: stats.total_al_queries_images,
                ssl_images: stats.ssl_images,
                pseudo_label_map: stats.pseudo_label_map,
                heldout_before: *heldout_before,
                heldout_after: *heldout_after,
            });
        }
    }
    rows
}
